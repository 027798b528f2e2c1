"""Per-domain residual adapters and their gate-weighted blending.

At decoder plugging point j with input y_j and frozen layer l_j the blended
output is::

    l_j(y_j) + sum_k v_k * Ad_j^k(y_j)

for K+1 domains (index 0 is the source domain).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
from torch import Tensor

from . import substrate as S
from .errors import ConfigurationError, ContractError, DimensionError

INIT_STD = 0.02


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of a decoder layer an adapter runs in parallel with."""

    kind: str  # "conv" (shape-preserving) or "tconv"
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1

    def build(self) -> nn.Module:
        if self.kind == "conv":
            return S.Conv2d(self.in_ch, self.out_ch, self.kernel, 1)
        if self.kind == "tconv":
            return S.TConv2d(self.in_ch, self.out_ch, self.kernel, self.stride)
        raise ConfigurationError(f"unknown adapter kind {self.kind!r}")


def plugging_shapes(decoder) -> List[LayerSpec]:
    """Adapter geometry for each plugging point of a ``SynthesisTransform``."""
    specs = []
    for layer in decoder.plugging_layers():
        kind = "tconv" if isinstance(layer, S.TConv2d) else "conv"
        specs.append(LayerSpec(kind, layer.in_ch, layer.out_ch, layer.kernel, layer.stride))
    return specs


class AdapterTriple(nn.Module):
    def __init__(self, specs: Sequence[LayerSpec], domain_id: int):
        super().__init__()
        self.domain_id = domain_id
        self.sites = nn.ModuleList([spec.build() for spec in specs])

    def forward(self, y: Tensor, site: int) -> Tensor:
        return self.sites[site](y)


class AdapterBank(nn.Module):
    def __init__(self, K: int, specs: Sequence[LayerSpec]):
        super().__init__()
        if K < 1:
            raise ContractError(f"adapter bank needs K >= 1 target domains, got {K}")
        self.K = K
        self.specs = list(specs)
        self.triples = nn.ModuleList([AdapterTriple(specs, k) for k in range(K + 1)])

    def config(self) -> dict:
        return {"K": self.K, "specs": [asdict(s) for s in self.specs]}

    @classmethod
    def from_config(cls, cfg: dict) -> "AdapterBank":
        return cls(cfg["K"], [LayerSpec(**s) for s in cfg["specs"]])


def init_bank(K: int, specs: Sequence[LayerSpec], init: str = "gaussian", seed: int = 0) -> AdapterBank:
    """Build K+1 adapter triples, weights N(0, 0.02^2) or all zero."""
    if init not in ("gaussian", "zero"):
        raise ConfigurationError(f"unknown init {init!r}")
    bank = AdapterBank(K, specs)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in bank.named_parameters():
            if init == "zero" or name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * INIT_STD)
    return bank


def blend(y_j: Tensor, layer_output: Tensor, bank: AdapterBank, v: Tensor, site: int) -> Tensor:
    """Add the v-weighted sum of site-``site`` adapter outputs to ``layer_output``.

    ``v`` is (K+1,) or (batch, K+1). Adapters whose weight is a constant zero
    for the whole batch are skipped; their gradient is exactly zero either way.
    """
    if v.shape[-1] != bank.K + 1:
        raise ContractError(f"v has {v.shape[-1]} entries, bank expects {bank.K + 1}")
    if v.dim() == 1:
        v = v.expand(layer_output.shape[0], -1)
    skip_zero = not v.requires_grad
    out = layer_output
    for k, triple in enumerate(bank.triples):
        w = v[:, k]
        if skip_zero and not torch.any(w):
            continue
        a = triple(y_j, site)
        if a.shape != layer_output.shape:
            raise DimensionError(
                f"adapter {k} site {site} output {tuple(a.shape)} != layer output {tuple(layer_output.shape)}"
            )
        out = out + w.view(-1, 1, 1, 1).to(a.dtype) * a
    return out


def parameter_count(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())
