"""Gate network: latent y -> probability distribution over K+1 domains."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import substrate as S
from .errors import ConfigurationError, ContractError

INIT_STD = 0.02


@dataclass
class GateConfig:
    K: int = 2
    in_channels: int = 32
    conv_channels: int = 32
    pool_kernel: int = 2
    adaptive_out: int = 2

    def __post_init__(self):
        if self.K < 1 or self.adaptive_out < 1:
            raise ConfigurationError(f"invalid gate config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class GateNetwork(nn.Module):
    """conv3x3 -> ReLU -> maxpool -> adaptive avg pool -> linear -> softmax."""

    def __init__(self, config: GateConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c, s = config.conv_channels, config.adaptive_out
        self.conv = S.Conv2d(config.in_channels, c, 3)
        self.fc = S.Linear(c * s * s, config.K + 1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in (self.conv.weight, self.fc.weight):
                p.copy_(torch.randn(p.shape, generator=gen) * INIT_STD)

    def forward(self, y: Tensor) -> Tuple[Tensor, Tensor]:
        """Return ``(logits, v)``, both of shape (batch, K+1)."""
        if y.dim() != 4 or y.shape[1] != self.config.in_channels:
            raise ContractError(f"gate expects N,{self.config.in_channels},h,w latent, got {tuple(y.shape)}")
        h = S.relu(self.conv(y))
        # latents of images under 64 px are too small to pool; repeat edge values
        need = self.config.pool_kernel * self.config.adaptive_out
        if h.shape[2] < need or h.shape[3] < need:
            h = F.pad(h, (0, max(0, need - h.shape[3]), 0, max(0, need - h.shape[2])), mode="replicate")
        h = S.maxpool2d(h, self.config.pool_kernel)
        h = S.adaptive_avg_pool2d(h, self.config.adaptive_out)
        logits = self.fc(h.flatten(1))
        return logits, S.softmax(logits, axis=-1)


def gate_parameter_count(config: GateConfig) -> int:
    c, s = config.conv_channels, config.adaptive_out
    conv = 9 * config.in_channels * c + c
    fc = c * s * s * (config.K + 1) + (config.K + 1)
    return conv + fc
