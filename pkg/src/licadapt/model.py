"""Backbone + adapter bank + gate, and the shared checkpoint container."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .adapters import AdapterBank, blend, init_bank, plugging_shapes
from .codec import Backbone, CodecConfig, Image, Latent, crop, pad_to_multiple, quantize
from .errors import CompatibilityError, ConfigurationError, ContractError
from .gate import GateConfig, GateNetwork
from .policy import apply_policy

FORMAT_VERSION = 1


class AdaptedCodec(nn.Module):
    """A frozen backbone whose decoder blends per-domain adapters.

    With ``bank`` and ``gate`` left as None the model is the plain backbone.
    """

    def __init__(
        self,
        backbone: Backbone,
        bank: Optional[AdapterBank] = None,
        gate: Optional[GateNetwork] = None,
        gate_input: str = "y",
    ):
        super().__init__()
        if (bank is None) != (gate is None):
            raise ConfigurationError("adapter bank and gate must be present together")
        if bank is not None and gate.config.K != bank.K:
            raise ConfigurationError(f"gate K={gate.config.K} != bank K={bank.K}")
        if gate_input not in ("y", "y_hat"):
            raise ConfigurationError(f"gate_input must be 'y' or 'y_hat', got {gate_input!r}")
        self.backbone = backbone
        self.bank = bank
        self.gate = gate
        self.gate_input = gate_input

    @classmethod
    def with_new_adapters(
        cls,
        backbone: Backbone,
        K: int,
        gate_config: Optional[GateConfig] = None,
        init: str = "gaussian",
        seed: int = 0,
        gate_input: str = "y",
    ) -> "AdaptedCodec":
        bank = init_bank(K, plugging_shapes(backbone.g_s), init=init, seed=seed)
        gcfg = gate_config or GateConfig(K=K, in_channels=backbone.config.M)
        if gcfg.K != K or gcfg.in_channels != backbone.config.M:
            raise ConfigurationError(f"gate config {gcfg} does not match K={K}, M={backbone.config.M}")
        return cls(backbone, bank, GateNetwork(gcfg, seed=seed + 1), gate_input)

    @property
    def K(self) -> Optional[int]:
        return None if self.bank is None else self.bank.K

    @property
    def config(self) -> CodecConfig:
        return self.backbone.config

    def freeze_backbone(self) -> None:
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def adapter_fn(self, weights: Optional[Tensor]):
        if self.bank is None or weights is None:
            return None
        bank = self.bank

        def fn(site: int, y_j: Tensor, out: Tensor) -> Tensor:
            return blend(y_j, out, bank, weights, site)

        return fn

    def gate_forward(self, y: Latent, y_hat: Latent) -> Tuple[Tensor, Tensor]:
        if self.gate is None:
            raise ContractError("model has no gate")
        src = y if self.gate_input == "y" else y_hat
        return self.gate(src.features)

    def forward(self, x: Tensor, labels: Optional[Tensor] = None, policy="proposed", clamp: bool = False) -> dict:
        """Stage-B pass on a padded batch: encoder untouched, ŷ rounded."""
        with torch.no_grad():
            y = self.backbone.encode_analysis(x)
            y_hat = quantize(y, "eval")
        logits, v = self.gate_forward(y, y_hat)
        w = apply_policy(v, labels, policy)
        x_hat = self.backbone.decode_synthesis(y_hat, self.adapter_fn(w), clamp=clamp)
        return {"x_hat": x_hat, "logits": logits, "v": v, "weights": w, "y_hat": y_hat}

    @torch.no_grad()
    def analyse(self, image: Image, policy="proposed", label: Optional[int] = None):
        """Encoder side for one image: returns (y_hat, v, weights, (H, W))."""
        x, hw = pad_to_multiple(image.to_tensor())
        y = self.backbone.encode_analysis(x)
        y_hat = quantize(y, "eval")
        if self.gate is None:
            return y_hat, None, None, hw
        _, v = self.gate_forward(y, y_hat)
        lab = None if label is None else torch.tensor([label])
        return y_hat, v[0], apply_policy(v, lab, policy)[0], hw

    @torch.no_grad()
    def synthesize(self, y_hat: Latent, weights: Optional[Tensor], hw: Tuple[int, int]) -> np.ndarray:
        """Decoder side: ŷ and adapter weights -> H x W x 3 pixels."""
        w = None if weights is None else weights.view(1, -1).to(torch.float32)
        x_hat = self.backbone.decode_synthesis(y_hat, self.adapter_fn(w))
        return crop(x_hat, hw)[0].permute(1, 2, 0).contiguous().numpy()


def _state(module: Optional[nn.Module]):
    return None if module is None else {k: v.detach().clone() for k, v in module.state_dict().items()}


def checkpoint_dict(model: AdaptedCodec, meta: Optional[dict] = None, train_state: Optional[dict] = None) -> dict:
    ckpt = {
        "format_version": FORMAT_VERSION,
        "codec_config": model.config.to_dict(),
        "variant": model.backbone.variant,
        "backbone": _state(model.backbone),
        "adapters": None if model.bank is None else {"config": model.bank.config(), "state": _state(model.bank)},
        "gate": None if model.gate is None else {"config": model.gate.config.to_dict(), "state": _state(model.gate)},
        "gate_input": model.gate_input,
        "meta": dict(meta or {}),
    }
    if train_state is not None:
        ckpt["train_state"] = train_state
    return ckpt


def model_from_dict(ckpt: dict) -> AdaptedCodec:
    version = ckpt.get("format_version")
    if version != FORMAT_VERSION:
        raise CompatibilityError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    backbone = Backbone(CodecConfig(**ckpt["codec_config"]), variant=ckpt.get("variant", "zou"))
    backbone.load_state_dict(ckpt["backbone"])
    bank = gate = None
    if ckpt.get("adapters") is not None:
        bank = AdapterBank.from_config(ckpt["adapters"]["config"])
        bank.load_state_dict(ckpt["adapters"]["state"])
        gate = GateNetwork(GateConfig(**ckpt["gate"]["config"]))
        gate.load_state_dict(ckpt["gate"]["state"])
    model = AdaptedCodec(backbone, bank, gate, ckpt.get("gate_input", "y"))
    model.eval()
    return model


def save_checkpoint(path: Union[str, os.PathLike], model: AdaptedCodec, meta: Optional[dict] = None,
                    train_state: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint_dict(model, meta, train_state), path)
    return path


def load_checkpoint_dict(path: Union[str, os.PathLike]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} not found")
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise CompatibilityError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path: Union[str, os.PathLike]) -> Tuple[AdaptedCodec, dict]:
    ckpt = load_checkpoint_dict(path)
    return model_from_dict(ckpt), ckpt.get("meta", {})


def backbone_hash(model: Union[AdaptedCodec, Backbone]) -> str:
    backbone = model.backbone if isinstance(model, AdaptedCodec) else model
    h = hashlib.sha256()
    for name, t in sorted(backbone.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
