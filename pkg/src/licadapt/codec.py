"""Factorized-prior autoencoder backbone.

The decoder exposes three named plugging points where adapter outputs are
blended into the frozen layers (see :mod:`licadapt.adapters`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from . import substrate as S
from .errors import CodecError, ConfigurationError, ContractError, ModelStateError

LAMBDA_LADDER: Tuple[float, ...] = (0.0018, 0.0067, 0.013, 0.0483)
STRIDE_PRODUCT = 16
LIKELIHOOD_FLOOR = 1e-9
SCALE_FLOOR = 1e-6
LRELU_SLOPE = 0.01
DEC_KERNEL = 5
# pixels are shifted to zero mean on the way in and back on the way out
PIXEL_OFFSET = 0.5

# decoder layers whose (input, output) pair forms each plugging point
PLUGGING_LAYERS = {
    "zou": ("refine", "up2", "up3"),
    "cheng": ("up1", "up2", "up3"),
}


@dataclass
class CodecConfig:
    M: int = 32
    N: int = 64
    quality_index: int = 0
    lambda_rd: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.quality_index < len(LAMBDA_LADDER):
            raise ConfigurationError(f"quality_index {self.quality_index} outside the ladder")
        if self.lambda_rd is None:
            self.lambda_rd = LAMBDA_LADDER[self.quality_index]
        if not self.lambda_rd > 0:
            raise ConfigurationError(f"lambda_rd must be > 0, got {self.lambda_rd}")
        if self.M < 8 or self.N < 8:
            raise ConfigurationError(f"M and N must be >= 8, got M={self.M} N={self.N}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Image:
    """An RGB image, H x W x 3 float32 in [0, 1]."""

    pixels: np.ndarray
    source_path: Optional[str] = None
    domain_label: Optional[int] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ContractError(f"image must be HxWx3, got {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ContractError("image pixels must be finite and lie in [0, 1]")
        self.pixels = px

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def to_tensor(self) -> Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))[None]


@dataclass
class Latent:
    features: Tensor
    quantized: bool = False
    noisy: bool = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape)


def pad_to_multiple(x: Tensor, multiple: int = STRIDE_PRODUCT) -> Tuple[Tensor, Tuple[int, int]]:
    """Reflect-pad an N,C,H,W batch so H and W divide ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return nn.functional.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


def crop(x: Tensor, hw: Tuple[int, int]) -> Tensor:
    return x[..., : hw[0], : hw[1]]


def round_half_away(t: Tensor) -> Tensor:
    return torch.sign(t) * torch.floor(torch.abs(t) + 0.5)


def quantize(y: Latent, mode: str = "eval", generator: Optional[torch.Generator] = None) -> Latent:
    """Round (``eval``) or add U(-0.5, 0.5) noise (``train``)."""
    if y.quantized or y.noisy:
        raise ContractError("latent is already quantized")
    if mode == "eval":
        return Latent(round_half_away(y.features), quantized=True)
    if mode == "train":
        f = y.features
        u = torch.rand(f.shape, generator=generator, dtype=f.dtype, device=f.device) - 0.5
        return Latent(f + u, noisy=True)
    raise ContractError(f"unknown quantization mode {mode!r}")


def _std_normal_cdf(x: Tensor) -> Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


class EntropyModel(nn.Module):
    """Per-channel discretized Gaussian over the latent symbols."""

    def __init__(self, M: int):
        super().__init__()
        self.mean = nn.Parameter(torch.zeros(M))
        self.scale = nn.Parameter(torch.ones(M))

    @torch.no_grad()
    def clamp_(self) -> None:
        self.scale.clamp_(min=SCALE_FLOOR)

    def likelihood(self, y_hat: Tensor) -> Tensor:
        if (self.scale <= 0).any():
            raise ModelStateError("entropy model has a non-positive scale")
        mu = self.mean.view(1, -1, 1, 1)
        s = self.scale.view(1, -1, 1, 1)
        # mirror into the lower tail; near the mode use erf, which keeps
        # precision where both CDF values are close to 1/2
        d = torch.abs(y_hat - mu)
        upper, lower = (0.5 - d) / s, (-0.5 - d) / s
        tail = _std_normal_cdf(upper) - _std_normal_cdf(lower)
        centre = 0.5 * (torch.erf(upper / math.sqrt(2.0)) - torch.erf(lower / math.sqrt(2.0)))
        p = torch.where(upper > 0, centre, tail)
        return torch.clamp(p, min=LIKELIHOOD_FLOOR)

    def forward(self, y_hat: Tensor) -> Tensor:
        return self.likelihood(y_hat)


def rate_estimate(y_hat: Latent, em: EntropyModel, per_channel: bool = False) -> Tensor:
    """Estimated bits, summed over batch and positions (per channel if asked)."""
    if not (y_hat.quantized or y_hat.noisy):
        raise ContractError("rate_estimate needs a quantized or noise-relaxed latent")
    bits = -torch.log2(em.likelihood(y_hat.features))
    if per_channel:
        return bits.sum(dim=(0, 2, 3))
    return bits.sum()


def rd_loss(x: Tensor, x_hat: Tensor, rate_bits: Tensor, lambda_rd: float) -> Tensor:
    """lambda * MSE (8-bit squared units) + bits per pixel."""
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    mse = torch.mean((x - x_hat) ** 2)
    return lambda_rd * mse * 255.0 ** 2 + rate_bits / num_pixels


class AnalysisTransform(nn.Module):
    def __init__(self, N: int, M: int):
        super().__init__()
        self.layers = nn.ModuleList(
            [S.Conv2d(3, N, 5, 2), S.Conv2d(N, N, 5, 2), S.Conv2d(N, N, 5, 2), S.Conv2d(N, M, 5, 2)]
        )

    def forward(self, x: Tensor) -> Tensor:
        x = x - PIXEL_OFFSET
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = S.leaky_relu(x, LRELU_SLOPE)
        return x


class RefineBlock(nn.Module):
    """Shape-preserving residual block in the middle of the decoder."""

    def __init__(self, N: int):
        super().__init__()
        self.conv_a = S.Conv2d(N, N, 3)
        self.conv_b = S.Conv2d(N, N, 3)
        self.in_ch = self.out_ch = N
        self.kernel, self.stride = 3, 1

    def forward(self, x: Tensor) -> Tensor:
        h = S.leaky_relu(self.conv_a(x), LRELU_SLOPE)
        return x + S.leaky_relu(self.conv_b(h), LRELU_SLOPE)


class SynthesisTransform(nn.Module):
    """up0 -> up1 -> refine -> up2 -> up3, four stride-2 transposed convs.

    ``adapter_fn(site, y_j, l_j(y_j))`` is called at every plugging point and
    returns the (possibly) blended output.
    """

    order = ("up0", "up1", "refine", "up2", "up3")
    activated = {"up0", "up1", "up2"}

    def __init__(self, N: int, M: int, variant: str = "zou"):
        super().__init__()
        if variant not in PLUGGING_LAYERS:
            raise ConfigurationError(f"unknown decoder variant {variant!r}")
        self.variant = variant
        self.up0 = S.TConv2d(M, N, DEC_KERNEL)
        self.up1 = S.TConv2d(N, N, DEC_KERNEL)
        self.refine = RefineBlock(N)
        self.up2 = S.TConv2d(N, N, DEC_KERNEL)
        self.up3 = S.TConv2d(N, 3, DEC_KERNEL)

    def plugging_layers(self) -> Sequence[nn.Module]:
        return [getattr(self, name) for name in PLUGGING_LAYERS[self.variant]]

    def forward(self, y: Tensor, adapter_fn=None) -> Tensor:
        sites = PLUGGING_LAYERS[self.variant]
        h = y
        for name in self.order:
            out = getattr(self, name)(h)
            if adapter_fn is not None and name in sites:
                out = adapter_fn(sites.index(name), h, out)
            h = S.leaky_relu(out, LRELU_SLOPE) if name in self.activated else out
        return h + PIXEL_OFFSET


class Backbone(nn.Module):
    """Encoder g_a, entropy model, decoder g_s."""

    def __init__(self, config: CodecConfig, variant: str = "zou", seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.g_a = AnalysisTransform(config.N, config.M)
            self.g_s = SynthesisTransform(config.N, config.M, variant)
        self.entropy = EntropyModel(config.M)

    @property
    def variant(self) -> str:
        return self.g_s.variant

    def encode_analysis(self, x: Tensor) -> Latent:
        """Map an N,3,H,W batch (H, W divisible by 16) to the latent y."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise CodecError(f"expected N,3,H,W input, got {tuple(x.shape)}")
        if x.shape[-2] % STRIDE_PRODUCT or x.shape[-1] % STRIDE_PRODUCT:
            raise CodecError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {STRIDE_PRODUCT}")
        y = self.g_a(x)
        S.check_finite(y.detach(), "encoder output")
        return Latent(y)

    def decode_synthesis(self, y_hat: Latent, adapter_fn=None, clamp: bool = True) -> Tensor:
        if y_hat.features.shape[1] != self.config.M:
            raise CodecError(
                f"latent has {y_hat.features.shape[1]} channels, decoder expects {self.config.M}"
            )
        x_hat = self.g_s(y_hat.features, adapter_fn)
        return x_hat.clamp(0.0, 1.0) if clamp else x_hat

    def forward(self, x: Tensor, generator: Optional[torch.Generator] = None):
        """Training pass with noise-relaxed quantization; returns (x_hat, bits)."""
        y = self.encode_analysis(x)
        y_tilde = quantize(y, "train", generator)
        bits = rate_estimate(y_tilde, self.entropy)
        x_hat = self.g_s(y_tilde.features)
        return x_hat, bits

    @torch.no_grad()
    def reconstruct(self, image: Image) -> Tuple[np.ndarray, Latent]:
        """Pure-backbone round trip of one image; returns (pixels, y_hat)."""
        x, hw = pad_to_multiple(image.to_tensor())
        y_hat = quantize(self.encode_analysis(x), "eval")
        x_hat = crop(self.decode_synthesis(y_hat), hw)
        return x_hat[0].permute(1, 2, 0).numpy(), y_hat
