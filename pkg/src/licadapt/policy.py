"""Blending policies: how the gate output becomes adapter weights."""

from __future__ import annotations

import enum
from typing import Optional

import torch
from torch import Tensor

from .errors import ContractError


class PolicyKind(str, enum.Enum):
    PROPOSED = "proposed"
    TOP1 = "top1"
    ORACLE = "oracle"

    @classmethod
    def parse(cls, value) -> "PolicyKind":
        try:
            return cls(value)
        except ValueError:
            raise ContractError(f"unknown blend policy {value!r}; choose from {[p.value for p in cls]}") from None


def apply_policy(v: Tensor, label: Optional[Tensor], kind) -> Tensor:
    """Turn gate probabilities into adapter weights.

    ``proposed`` keeps ``v`` (and its gradient); ``top1`` and ``oracle`` return
    detached one-hot vectors at argmax(v) (first index on ties) and at
    ``label`` respectively.
    """
    kind = PolicyKind.parse(kind)
    if kind is PolicyKind.PROPOSED:
        return v
    n = v.shape[-1]
    if kind is PolicyKind.TOP1:
        idx = torch.argmax(v.detach(), dim=-1)
    else:
        if label is None:
            raise ContractError("oracle policy needs a domain label")
        idx = torch.as_tensor(label, dtype=torch.long)
        if idx.shape != v.shape[:-1]:
            idx = idx.expand(v.shape[:-1])
        if (idx < 0).any() or (idx >= n).any():
            raise ContractError(f"label out of range [0, {n - 1}]")
    return torch.nn.functional.one_hot(idx, n).to(v.dtype)
