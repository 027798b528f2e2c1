import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from licadapt import substrate as S
from licadapt.adapters import AdapterBank, LayerSpec, blend, init_bank, parameter_count, plugging_shapes
from licadapt.codec import Backbone, CodecConfig
from licadapt.errors import ContractError, DimensionError

SPECS = [LayerSpec("conv", 4, 4, 3, 1), LayerSpec("tconv", 4, 4, 3, 2), LayerSpec("tconv", 4, 3, 3, 2)]


def site_inputs(seed=0, batch=2):
    g = torch.Generator().manual_seed(seed)
    y0 = torch.randn(batch, 4, 8, 8, generator=g)
    return [y0, y0, torch.randn(batch, 4, 16, 16, generator=g)]


def layer_outputs(ys, seed=1):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(ys[0].shape, generator=g), torch.randn(ys[1].shape[0], 4, 16, 16, generator=g),
            torch.randn(ys[2].shape[0], 3, 32, 32, generator=g)]


def test_k2_bank_has_three_triples():
    bank = init_bank(2, SPECS)
    assert len(bank.triples) == 3
    assert [t.domain_id for t in bank.triples] == [0, 1, 2]


def test_degenerate_bank_rejected():
    with pytest.raises(ContractError):
        init_bank(0, SPECS)


def test_gaussian_init_statistics_and_reproducibility():
    a = init_bank(3, SPECS, seed=9)
    b = init_bank(3, SPECS, seed=9)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)
    w = torch.cat([p.flatten() for n, p in a.named_parameters() if n.endswith("weight")])
    assert abs(w.std().item() - 0.02) < 0.001
    assert all(torch.count_nonzero(p) == 0 for n, p in a.named_parameters() if n.endswith("bias"))


def test_zero_init_blend_is_identity():
    bank = init_bank(2, SPECS, init="zero")
    ys = site_inputs()
    outs = layer_outputs(ys)
    v = torch.softmax(torch.randn(2, 3), -1)
    for site in range(3):
        assert torch.equal(blend(ys[site], outs[site], bank, v, site), outs[site])


def test_one_hot_blend_equals_single_adapter():
    bank = init_bank(2, SPECS, seed=4)
    ys = site_inputs()
    outs = layer_outputs(ys)
    for k in range(3):
        v = torch.nn.functional.one_hot(torch.tensor(k), 3).float()
        for site in range(3):
            ref = outs[site] + bank.triples[k](ys[site], site)
            assert torch.allclose(blend(ys[site], outs[site], bank, v, site), ref, atol=1e-6, rtol=0)


def test_half_half_blend_of_constant_adapters():
    bank = init_bank(2, SPECS, init="zero")
    # a zero-weight conv with bias c outputs the constant c
    with torch.no_grad():
        bank.triples[0].sites[0].bias.fill_(2.0)
        bank.triples[1].sites[0].bias.fill_(-6.0)
        bank.triples[2].sites[0].bias.fill_(100.0)
    y = torch.randn(1, 4, 8, 8)
    base = torch.randn(1, 4, 8, 8)
    out = blend(y, base, bank, torch.tensor([0.5, 0.5, 0.0]), 0)
    assert torch.allclose(out - base, torch.full_like(base, 0.5 * 2.0 + 0.5 * -6.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0))
def test_blend_is_linear_in_v(seed, alpha):
    bank = init_bank(2, SPECS, seed=seed)
    ys = site_inputs(seed)
    outs = layer_outputs(ys, seed + 1)
    g = torch.Generator().manual_seed(seed)
    v1 = torch.softmax(torch.randn(3, generator=g), -1)
    v2 = torch.softmax(torch.randn(3, generator=g), -1)
    for site in range(3):
        mix = blend(ys[site], outs[site], bank, alpha * v1 + (1 - alpha) * v2, site) - outs[site]
        r1 = blend(ys[site], outs[site], bank, v1, site) - outs[site]
        r2 = blend(ys[site], outs[site], bank, v2, site) - outs[site]
        assert torch.allclose(mix, alpha * r1 + (1 - alpha) * r2, atol=1e-5, rtol=0)


def test_wrong_v_length():
    bank = init_bank(2, SPECS)
    ys = site_inputs()
    with pytest.raises(ContractError):
        blend(ys[0], layer_outputs(ys)[0], bank, torch.ones(2) / 2, 0)


def test_adapter_shape_mismatch():
    bank = init_bank(1, [LayerSpec("conv", 4, 5, 3, 1)])
    with pytest.raises(DimensionError):
        blend(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 8), bank, torch.tensor([0.5, 0.5]), 0)


def test_gradients_reach_exactly_the_weighted_adapters():
    bank = init_bank(2, SPECS, seed=2)
    ys = site_inputs()
    outs = layer_outputs(ys)
    v = torch.tensor([0.7, 0.0, 0.3])
    loss = sum(blend(ys[s], outs[s], bank, v, s).pow(2).sum() for s in range(3))
    grads = S.backward(loss, list(bank.named_parameters()))
    for k in range(3):
        norm = sum(grads[n].abs().sum().item() for n, _ in bank.named_parameters() if n.startswith(f"triples.{k}."))
        assert (norm > 0) == (v[k].item() != 0)


def test_gradient_flows_into_v():
    bank = init_bank(2, SPECS, seed=2)
    ys = site_inputs()
    outs = layer_outputs(ys)
    v = torch.tensor([0.2, 0.3, 0.5], requires_grad=True)
    blend(ys[1], outs[1], bank, v, 1).sum().backward()
    assert torch.count_nonzero(v.grad) == 3


def test_single_conv_parameter_count_closed_form():
    C = 7
    bank = AdapterBank(1, [LayerSpec("conv", C, C, 3, 1)])
    assert parameter_count(bank.triples[0]) == 9 * C * C + C


def test_bank_parameter_count_matches_layers():
    backbone = Backbone(CodecConfig(M=8, N=16))
    specs = plugging_shapes(backbone.g_s)
    bank = init_bank(2, specs)
    per = sum(s.in_ch * s.out_ch * s.kernel ** 2 + s.out_ch for s in specs)
    assert parameter_count(bank) == 3 * per
    # each adapter mirrors its layer exactly
    layers = backbone.g_s.plugging_layers()
    assert parameter_count(layers[1]) + parameter_count(layers[2]) == parameter_count(bank.triples[0]) - (
        9 * 16 * 16 + 16)


def test_adapter_outputs_match_parallel_layers():
    backbone = Backbone(CodecConfig(M=8, N=16))
    bank = init_bank(2, plugging_shapes(backbone.g_s))
    seen = []

    def probe(site, y_j, out):
        seen.append(site)
        assert bank.triples[1](y_j, site).shape == out.shape
        return out

    backbone.g_s(torch.zeros(1, 8, 4, 4), probe)
    assert seen == [0, 1, 2]


def test_config_round_trip():
    bank = init_bank(2, SPECS, seed=3)
    clone = AdapterBank.from_config(bank.config())
    clone.load_state_dict(bank.state_dict())
    y = torch.randn(1, 4, 8, 8)
    assert torch.equal(clone.triples[2](y, 0), bank.triples[2](y, 0))
    assert isinstance(clone.triples[0].sites[1], nn.Module)
