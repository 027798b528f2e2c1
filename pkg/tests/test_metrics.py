import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from licadapt.codec import Backbone, CodecConfig, Image
from licadapt.data import DomainDataset, DomainItem, SyntheticRef
from licadapt.errors import ArityError, ConfigurationError, ContractError, NoOverlapError
from licadapt.metrics import (
    PSNR_CAP,
    RDCurve,
    RDPoint,
    bd_metrics,
    bd_psnr,
    bd_rate,
    bpp,
    capped,
    code_image,
    evaluate_model,
    psnr,
    render_report,
)
from licadapt.model import AdaptedCodec

ANCHOR = [(0.12, 27.1), (0.25, 29.8), (0.47, 32.4), (0.88, 35.3)]


def curve(pairs, label=""):
    return RDCurve.from_pairs(pairs, label)


def scaled(pairs, rate=1.0, dq=0.0):
    return [(r * rate, q + dq) for r, q in pairs]


def oracle_bd_rate(anchor, test):
    """Independent path: polyfit/polyval with adaptive quadrature."""
    pa = np.polyfit([q for _, q in anchor], np.log10([r for r, _ in anchor]), 3)
    pt = np.polyfit([q for _, q in test], np.log10([r for r, _ in test]), 3)
    lo = max(min(q for _, q in anchor), min(q for _, q in test))
    hi = min(max(q for _, q in anchor), max(q for _, q in test))
    ia = quad(lambda q: np.polyval(pa, q), lo, hi)[0]
    it = quad(lambda q: np.polyval(pt, q), lo, hi)[0]
    return (10 ** ((it - ia) / (hi - lo)) - 1) * 100


def oracle_bd_psnr(anchor, test):
    pa = np.polyfit(np.log10([r for r, _ in anchor]), [q for _, q in anchor], 3)
    pt = np.polyfit(np.log10([r for r, _ in test]), [q for _, q in test], 3)
    lo = max(np.log10(min(r for r, _ in anchor)), np.log10(min(r for r, _ in test)))
    hi = min(np.log10(max(r for r, _ in anchor)), np.log10(max(r for r, _ in test)))
    return (quad(lambda x: np.polyval(pt, x), lo, hi)[0] - quad(lambda x: np.polyval(pa, x), lo, hi)[0]) / (hi - lo)


def test_psnr_identical_is_inf_and_capped():
    x = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(x, x) == math.inf
    assert capped(psnr(x, x)) == PSNR_CAP == 100.0


def test_psnr_black_vs_white_is_zero():
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_matches_direct_formula():
    rng = np.random.default_rng(1)
    a, b = rng.random((32, 48, 3)), rng.random((32, 48, 3))
    a8 = np.round(a * 255).astype(np.int64)
    b8 = np.round(b * 255).astype(np.int64)
    mse = np.sum((a8 - b8) ** 2) / a8.size
    direct = 20 * math.log10(255) - 10 * math.log10(mse)
    assert abs(psnr(a, b) - direct) < 1e-9
    assert psnr(a, b) == psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(ContractError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_bpp_formula():
    assert bpp(b"x" * 100, 64, 50) == 8 * 100 / (64 * 50)


def test_rd_point_and_curve_validation():
    with pytest.raises(ContractError):
        RDPoint(0.0, 30.0)
    with pytest.raises(ArityError):
        curve(ANCHOR[:3])
    with pytest.raises(ContractError):
        curve([(0.1, 30), (0.2, 29), (0.3, 31), (0.4, 32)])
    # infinite PSNR points are dropped before fitting
    assert len(curve(ANCHOR + [(1.5, math.inf)]).points) == 4


def test_identical_curves_give_zero():
    r, p = bd_metrics(curve(ANCHOR), curve(ANCHOR))
    assert abs(r) < 1e-9 and abs(p) < 1e-9


def test_rate_scaled_by_point_nine():
    assert bd_rate(curve(ANCHOR), curve(scaled(ANCHOR, 0.9))) == pytest.approx(-10.0, abs=0.01)


def test_psnr_offset_half_db():
    assert bd_psnr(curve(ANCHOR), curve(scaled(ANCHOR, dq=0.5))) == pytest.approx(0.5, abs=0.01)


@pytest.mark.parametrize("method", ["cubic", "pchip"])
def test_antisymmetry(method):
    a, b = curve(ANCHOR), curve([(0.1, 27.5), (0.22, 30.1), (0.45, 32.9), (0.8, 35.6)])
    rab, pab = bd_metrics(a, b, method)
    rba, pba = bd_metrics(b, a, method)
    assert pab == pytest.approx(-pba, abs=1e-9)
    assert (1 + rab / 100) * (1 + rba / 100) == pytest.approx(1.0, rel=1e-3)


def random_curve(draw_rates, draw_q):
    rates = np.cumsum(np.abs(draw_rates)) + 0.05
    qs = 25 + np.cumsum(np.abs(draw_q) + 0.3)
    return list(zip(rates.tolist(), qs.tolist()))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.05, 0.6), min_size=4, max_size=6), st.floats(0.8, 1.2), st.floats(-0.6, 0.6),
       st.lists(st.floats(0.5, 3.0), min_size=6, max_size=6))
def test_cubic_bd_matches_quadrature_oracle(rates, rate_mul, dq, qsteps):
    a = random_curve(np.array(rates), np.array(qsteps[: len(rates)]))
    b = [(r * rate_mul * (1 + 0.03 * i), q + dq) for i, (r, q) in enumerate(a)]
    try:
        got_r, got_p = bd_metrics(curve(a), curve(b))
    except NoOverlapError:
        return
    assert got_r == pytest.approx(oracle_bd_rate(a, b), rel=1e-6, abs=1e-6)
    assert got_p == pytest.approx(oracle_bd_psnr(a, b), rel=1e-6, abs=1e-6)


def test_no_overlap():
    far = scaled(ANCHOR, dq=20)
    with pytest.raises(NoOverlapError):
        bd_rate(curve(ANCHOR), curve(far))
    with pytest.raises(NoOverlapError):
        bd_psnr(curve(ANCHOR), curve(scaled(ANCHOR, rate=100)))


def test_unknown_method():
    with pytest.raises(ConfigurationError):
        bd_rate(curve(ANCHOR), curve(ANCHOR), "spline")


# -- evaluation report on untrained models ---------------------------------------------


def _dataset():
    items = [DomainItem(SyntheticRef(kind, 0, i, (64, 64)), label, "test")
             for label, kind in enumerate(["smooth-texture", "line-sketch", "flat-regions"]) for i in range(2)]
    return DomainDataset(items, ["natural", "sketch", "comic"], "test")


def test_code_image_reports_exact_bpp(tiny_adapted):
    img = Image(np.random.default_rng(0).random((64, 80, 3), dtype=np.float32))
    res = code_image(tiny_adapted, img, "proposed")
    assert res["bpp"] == 8 * len(res["stream"]) / (64 * 80)
    assert res["x_hat"].shape == (64, 80, 3)
    assert abs(res["v"].sum() - 1) < 1e-6


def test_report_rows_and_policy_columns(tiny_backbone):
    ds = _dataset()
    subsets = {name: DomainDataset([it for it in ds.items if it.label == k], ds.domains, "test")
               for k, name in enumerate(ds.domains)}
    anchors = {q: AdaptedCodec(Backbone(CodecConfig(M=8, N=8, quality_index=q))) for q in range(4)}
    adapted = {p: {2: AdaptedCodec.with_new_adapters(anchors[2].backbone, 2, seed=1)}
               for p in ("proposed", "top1", "oracle")}
    report = evaluate_model(anchors, adapted, subsets, policy_quality=2)
    for name, entry in report["datasets"].items():
        v = entry["policies"]["proposed"]["mean_v"]["2"]
        assert len(v) == 3 and abs(sum(v) - 1) < 1e-6
    for row in report["policy_table"].values():
        assert {"reference", "proposed", "top1", "oracle"} <= set(row)
    text = render_report(report, ds.domains)
    assert "top1" in text and "oracle" in text and "natural=" in text
    assert report["parameters"]["adapters"] > 0


def test_empty_dataset_is_configuration_error():
    anchors = {q: AdaptedCodec(Backbone(CodecConfig(M=8, N=8, quality_index=q))) for q in range(4)}
    with pytest.raises(ConfigurationError):
        evaluate_model(anchors, {}, {"none": DomainDataset([], ["natural"], "test")})
    with pytest.raises(ConfigurationError):
        evaluate_model({0: anchors[0]}, {}, {"x": _dataset()})
