"""Differentiable operations the codec, adapters and gate are built from.

Autograd is delegated to PyTorch. The wrappers here pin down shape contracts,
raise :class:`DimensionError` on violations, and provide a ``backward`` that
leaves exact zeros on frozen parameters.
"""

from __future__ import annotations

import math
from typing import Dict, Iterable, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ContractError, DimensionError, NonFiniteError

_Pair = Union[int, Tuple[int, int]]


def _pair(v: _Pair) -> Tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NonFiniteError(f"{what}: {bad} non-finite value(s) in shape {tuple(t.shape)}")
    return t


def _check_4d(x: Tensor, op: str) -> None:
    if x.dim() != 4:
        raise DimensionError(f"{op} expects N,C,H,W input, got shape {tuple(x.shape)}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    _check_4d(x, "conv2d")
    if weight.dim() != 4:
        raise DimensionError(f"conv2d weight must be 4-d, got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    kh, kw = weight.shape[-2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input "
            f"{x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def tconv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int = 2,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution; weight layout is (C_in, C_out, kH, kW)."""
    _check_4d(x, "tconv2d")
    if weight.dim() != 4 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"tconv2d input has {x.shape[1]} channels, weight shape {tuple(weight.shape)}"
        )
    if not 0 <= output_padding < stride:
        raise DimensionError(f"output_padding={output_padding} must lie in [0, stride={stride})")
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding, output_padding=output_padding)


def relu(x: Tensor) -> Tensor:
    return F.relu(x)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return F.leaky_relu(x, slope)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    if x.dim() == 2:
        return maxpool2d(x[None, None], k)[0, 0]
    _check_4d(x, "maxpool2d")
    if k > x.shape[2] or k > x.shape[3]:
        raise DimensionError(f"maxpool2d kernel {k} larger than input {tuple(x.shape[2:])}")
    return F.max_pool2d(x, k)


def adaptive_avg_pool2d(x: Tensor, out_hw: _Pair) -> Tensor:
    _check_4d(x, "adaptive_avg_pool2d")
    oh, ow = _pair(out_hw)
    if oh > x.shape[2] or ow > x.shape[3]:
        raise DimensionError(
            f"adaptive pool target {oh}x{ow} larger than input {x.shape[2]}x{x.shape[3]}"
        )
    return F.adaptive_avg_pool2d(x, (oh, ow))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear input width {x.shape[-1]} != weight width {weight.shape[1]}")
    return F.linear(x, weight, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax axis {axis} invalid for {x.dim()}-d tensor")
    return torch.softmax(x, dim=axis)


def backward(loss: Tensor, params: Optional[Iterable[Tuple[str, nn.Parameter]]] = None) -> Dict[str, Tensor]:
    """Backpropagate a scalar loss.

    Args:
        loss: zero-dimensional tensor.
        params: ``(name, parameter)`` pairs to report; parameters with
            ``requires_grad=False`` receive an explicit all-zero gradient.

    Returns:
        Mapping from parameter name to its gradient.
    """
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()
    grads: Dict[str, Tensor] = {}
    for name, p in params or ():
        if not p.requires_grad or p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            check_finite(p.grad, f"grad[{name}]")
        grads[name] = p.grad
    return grads


class Conv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: Optional[int] = None):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def extra_repr(self) -> str:
        return f"{self.in_ch}, {self.out_ch}, k={self.kernel}, s={self.stride}, p={self.padding}"


class TConv2d(nn.Module):
    """Stride-``s`` transposed convolution that multiplies spatial dims by ``s``."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 2):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2
        self.output_padding = stride - 1
        self.weight = nn.Parameter(torch.empty(in_ch, out_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x: Tensor) -> Tensor:
        return tconv2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)

    def extra_repr(self) -> str:
        return f"{self.in_ch}, {self.out_ch}, k={self.kernel}, s={self.stride}"


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
