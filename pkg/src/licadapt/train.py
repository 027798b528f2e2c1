"""Stage A: rate-distortion pretraining. Stage B: adapter + gate training.

Stage B minimizes ``gamma * MSE(x, x_hat) + CE(label, v)`` with every
backbone parameter frozen; there is no rate term because the encoder and
entropy model never change.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from . import substrate as S
from .codec import Backbone, CodecConfig, quantize, rate_estimate, rd_loss
from .data import DomainDataset, batch_iterator, eval_batches
from .errors import ConfigurationError, ContractError, DivergenceError, NonFiniteError
from .gate import GateConfig
from .model import AdaptedCodec, checkpoint_dict, model_from_dict
from .policy import PolicyKind

log = logging.getLogger(__name__)

MSE_SCALES = {"unit": 1.0, "8bit": 255.0 ** 2}


@dataclass
class TrainConfig:
    gamma: float = 0.5
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 400
    patience: int = 15
    seed: int = 0
    crop_size: int = 64
    mse_scale: str = "unit"
    val_fraction: float = 0.1
    augment: bool = True

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be > 0, got {self.gamma}")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.mse_scale not in MSE_SCALES:
            raise ConfigurationError(f"mse_scale must be one of {sorted(MSE_SCALES)}")
        if self.batch_size < 1 or self.epochs < 0 or not self.lr > 0:
            raise ConfigurationError(f"invalid training config {self}")


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = float("inf")
    lr: float = 0.0
    log: List[dict] = field(default_factory=list)


def split_validation(ds: DomainDataset, fraction: float, seed: int) -> Tuple[DomainDataset, DomainDataset]:
    """Train/val pair: the dataset's own val split if present, else a seeded carve-out."""
    train, val = ds.subset("train"), ds.subset("val")
    if len(val) > 0 or fraction <= 0:
        return train, val
    rng = np.random.default_rng([seed, 7919])
    order = rng.permutation(len(train))
    n_val = max(1, int(round(fraction * len(train)))) if len(train) > 1 else 0
    pick = set(order[:n_val].tolist())
    tr = [it for i, it in enumerate(train.items) if i not in pick]
    va = [it for i, it in enumerate(train.items) if i in pick]
    return DomainDataset(tr, ds.domains, "train"), DomainDataset(va, ds.domains, "val")


def adapter_loss(
    x: Tensor,
    x_hat: Tensor,
    logits: Tensor,
    label: Tensor,
    gamma: float,
    mse_scale: str = "unit",
) -> Tuple[Tensor, Tensor, Tensor]:
    """Return ``(loss, mse, ce)`` with loss = gamma * mse + ce."""
    label = torch.as_tensor(label, dtype=torch.long)
    n_classes = logits.shape[-1]
    if (label < 0).any() or (label >= n_classes).any():
        raise ContractError(f"domain label outside [0, {n_classes - 1}]")
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = torch.mean((x - x_hat) ** 2) * MSE_SCALES[mse_scale]
    ce = F.cross_entropy(logits, label.view(-1))
    return gamma * mse + ce, mse, ce


def _rng_state(data_rng: np.random.Generator, noise: torch.Generator) -> dict:
    return {"data": data_rng.bit_generator.state, "noise": noise.get_state()}


def _restore_rng(state: dict, data_rng: np.random.Generator, noise: torch.Generator) -> None:
    data_rng.bit_generator.state = state["data"]
    noise.set_state(state["noise"])


def _write_log(path: Optional[Union[str, Path]], records: List[dict]) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _abort(exc: Exception, stage: str, epoch: int, step: int, lr: float):
    raise DivergenceError(f"{stage} diverged at epoch {epoch} step {step} (lr={lr:g}): {exc}") from exc


# -- stage A --------------------------------------------------------------------


@torch.no_grad()
def evaluate_rd(model: Backbone, ds: DomainDataset, batch_size: int, crop: Optional[int]) -> dict:
    """Mean RD loss / MSE / bpp on center crops with hard rounding."""
    total = {"loss": 0.0, "mse": 0.0, "bpp": 0.0}
    n = 0
    for x, _ in eval_batches(ds, batch_size, crop):
        y_hat = quantize(model.encode_analysis(x), "eval")
        bits = rate_estimate(y_hat, model.entropy)
        x_hat = model.decode_synthesis(y_hat, clamp=False)
        loss = rd_loss(x, x_hat, bits, model.config.lambda_rd)
        b = x.shape[0]
        total["loss"] += loss.item() * b
        total["mse"] += torch.mean((x - x_hat) ** 2).item() * b
        total["bpp"] += bits.item() / (x.shape[-2] * x.shape[-1])
        n += b
    return {k: v / max(n, 1) for k, v in total.items()}


def pretrain_backbone(
    dataset: DomainDataset,
    codec_config: CodecConfig,
    config: TrainConfig,
    variant: str = "zou",
    resume: Optional[dict] = None,
    log_path: Optional[Union[str, Path]] = None,
    epochs: Optional[int] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    init_from: Optional[dict] = None,
) -> Tuple[AdaptedCodec, dict]:
    """RD-train a backbone on source images (labels ignored).

    Args:
        dataset: images with a ``train`` split (and optionally ``val``).
        resume: a checkpoint dict holding ``train_state`` to continue from.
        init_from: a backbone checkpoint (usually another quality) whose
            weights seed a fresh run; optimizer and schedule start anew.
        epochs: stop after this many epochs in total (defaults to config.epochs).

    Returns:
        ``(model, checkpoint)``; the checkpoint dict carries the train state
        so it can be passed back as ``resume``.
    """
    train, val = split_validation(dataset, config.val_fraction, config.seed)
    if len(train) == 0:
        raise ConfigurationError("pretraining dataset is empty")
    target = config.epochs if epochs is None else epochs
    data_rng = np.random.default_rng(config.seed)
    noise = torch.Generator().manual_seed(config.seed + 1)
    if resume is None:
        model = AdaptedCodec(Backbone(codec_config, variant=variant, seed=config.seed))
        if init_from is not None:
            if init_from.get("variant", "zou") != variant:
                raise ConfigurationError(f"cannot warm-start a {variant} backbone from {init_from.get('variant')}")
            src = CodecConfig(**init_from["codec_config"])
            if (src.M, src.N) != (codec_config.M, codec_config.N):
                raise ConfigurationError(f"warm-start checkpoint has M,N={src.M},{src.N}")
            model.backbone.load_state_dict(init_from["backbone"])
        state = TrainState(lr=config.lr)
    else:
        model = model_from_dict(resume)
        ts = resume["train_state"]
        state = TrainState(ts["epoch"], ts["best_val"], ts["lr"], list(ts["log"]))
    backbone = model.backbone
    opt = torch.optim.Adam(backbone.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=0.5, patience=config.patience)
    if resume is not None:
        ts = resume["train_state"]
        opt.load_state_dict(ts["optimizer"])
        sched.load_state_dict(ts["scheduler"])
        _restore_rng(ts["rng"], data_rng, noise)
    named = list(backbone.named_parameters())
    lam = backbone.config.lambda_rd

    while state.epoch < target:
        backbone.train()
        sums = {"loss": 0.0, "mse": 0.0, "bpp": 0.0}
        n = 0
        for step, (x, _) in enumerate(batch_iterator(train, config.batch_size, config.crop_size,
                                                     config.augment, data_rng, balanced=False)):
            x_hat, bits = backbone(x, noise)
            loss = rd_loss(x, x_hat, bits, lam)
            opt.zero_grad(set_to_none=True)
            try:
                S.backward(loss, named)
            except NonFiniteError as exc:
                _abort(exc, "pretraining", state.epoch + 1, step, opt.param_groups[0]["lr"])
            opt.step()
            backbone.entropy.clamp_()
            b = x.shape[0]
            sums["loss"] += loss.item() * b
            sums["mse"] += torch.mean((x - x_hat.detach()) ** 2).item() * b
            sums["bpp"] += bits.item() / (x.shape[-2] * x.shape[-1])
            n += b
        state.epoch += 1
        rec = {"epoch": state.epoch, "split": "train", "lr": opt.param_groups[0]["lr"],
               **{k: v / max(n, 1) for k, v in sums.items()}}
        state.log.append(rec)
        backbone.eval()
        if len(val):
            vrec = {"epoch": state.epoch, "split": "val", "lr": opt.param_groups[0]["lr"],
                    **evaluate_rd(backbone, val, config.batch_size, config.crop_size)}
            state.log.append(vrec)
            monitor = vrec["loss"]
        else:
            monitor = rec["loss"]
        sched.step(monitor)
        state.best_val = min(state.best_val, monitor)
        state.lr = opt.param_groups[0]["lr"]
        log.info("pretrain q%d epoch %d loss %.4f", backbone.config.quality_index, state.epoch, rec["loss"])
        if on_epoch is not None:
            on_epoch(rec)

    _write_log(log_path, state.log)
    ts = {
        "epoch": state.epoch,
        "best_val": state.best_val,
        "lr": state.lr,
        "log": state.log,
        "optimizer": opt.state_dict(),
        "scheduler": sched.state_dict(),
        "rng": _rng_state(data_rng, noise),
    }
    meta = {"stage": "pretrain", "train_config": asdict(config)}
    if init_from is not None:
        meta["init_from_quality"] = init_from["codec_config"]["quality_index"]
    return model, checkpoint_dict(model, meta, ts)


# -- stage B --------------------------------------------------------------------


@torch.no_grad()
def evaluate_adapted(model: AdaptedCodec, ds: DomainDataset, config: TrainConfig, policy) -> dict:
    total = {"loss": 0.0, "mse": 0.0, "ce": 0.0, "gate_acc": 0.0}
    n = 0
    for x, labels in eval_batches(ds, config.batch_size, config.crop_size):
        out = model(x, labels, policy)
        loss, mse, ce = adapter_loss(x, out["x_hat"], out["logits"], labels, config.gamma, config.mse_scale)
        b = x.shape[0]
        total["loss"] += loss.item() * b
        total["mse"] += mse.item() * b
        total["ce"] += ce.item() * b
        total["gate_acc"] += (out["logits"].argmax(-1) == labels).sum().item()
        n += b
    return {k: v / max(n, 1) for k, v in total.items()}


def train_adapters(
    backbone_ckpt: Union[dict, AdaptedCodec],
    dataset: DomainDataset,
    config: TrainConfig,
    policy="proposed",
    gate_config: Optional[GateConfig] = None,
    gate_input: str = "y",
    init: str = "gaussian",
    log_path: Optional[Union[str, Path]] = None,
    on_step: Optional[Callable[[AdaptedCodec, dict], None]] = None,
) -> Tuple[AdaptedCodec, dict]:
    """Jointly train K+1 adapter triples and the gate on a frozen backbone.

    ``on_step(model, grads)`` is called after each backward pass, before the
    optimizer update (used by freeze checks).
    """
    policy = PolicyKind.parse(policy)
    train, val = split_validation(dataset, config.val_fraction, config.seed)
    train.require_all_labels()
    K = dataset.K
    if K < 1:
        raise ConfigurationError("adapter training needs at least one target domain")
    if isinstance(backbone_ckpt, AdaptedCodec):
        backbone = backbone_ckpt.backbone
    else:
        backbone = model_from_dict(backbone_ckpt).backbone
    model = AdaptedCodec.with_new_adapters(backbone, K, gate_config, init=init, seed=config.seed,
                                          gate_input=gate_input)
    model.freeze_backbone()
    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=config.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=0.5, patience=config.patience)
    data_rng = np.random.default_rng(config.seed)
    named = list(model.named_parameters())
    state = TrainState(lr=config.lr)

    for epoch in range(1, config.epochs + 1):
        model.bank.train()
        model.gate.train()
        sums = {"loss": 0.0, "mse": 0.0, "ce": 0.0, "gate_acc": 0.0}
        n = 0
        for step, (x, labels) in enumerate(batch_iterator(train, config.batch_size, config.crop_size,
                                                          config.augment, data_rng)):
            out = model(x, labels, policy)
            loss, mse, ce = adapter_loss(x, out["x_hat"], out["logits"], labels, config.gamma, config.mse_scale)
            opt.zero_grad(set_to_none=True)
            try:
                grads = S.backward(loss, named)
            except NonFiniteError as exc:
                _abort(exc, "adapter training", epoch, step, opt.param_groups[0]["lr"])
            if on_step is not None:
                on_step(model, grads)
            opt.step()
            b = x.shape[0]
            sums["loss"] += loss.item() * b
            sums["mse"] += mse.item() * b
            sums["ce"] += ce.item() * b
            sums["gate_acc"] += (out["logits"].argmax(-1) == labels).sum().item()
            n += b
        rec = {"epoch": epoch, "split": "train", "lr": opt.param_groups[0]["lr"],
               **{k: v / max(n, 1) for k, v in sums.items()}}
        state.log.append(rec)
        model.eval()
        if len(val):
            vrec = {"epoch": epoch, "split": "val", "lr": opt.param_groups[0]["lr"],
                    **evaluate_adapted(model, val, config, policy)}
            state.log.append(vrec)
            monitor = vrec["loss"]
        else:
            monitor = rec["loss"]
        sched.step(monitor)
        state.epoch = epoch
        state.best_val = min(state.best_val, monitor)
        state.lr = opt.param_groups[0]["lr"]
        log.info("adapt epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["gate_acc"])

    model.eval()
    _write_log(log_path, state.log)
    meta = {
        "stage": "adapt",
        "blend_policy": policy.value,
        "domains": list(dataset.domains),
        "init": init,
        "train_config": asdict(config),
        "metric_log": state.log,
    }
    return model, checkpoint_dict(model, meta)
