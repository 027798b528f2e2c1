"""Multi-quality training and evaluation runs, plus the desk-scale preset.

A run directory holds ``backbone_q{q}.pt``, ``adapted_{policy}_q{q}.pt``,
their metric logs, ``resolved_config.json`` and the evaluation report.
Stages whose checkpoint already exists are skipped, so an interrupted run
can be restarted with the same config.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import torch

from .codec import CodecConfig
from .data import DESK_DOMAINS, DomainDataset, synthetic_dataset
from .errors import ConfigurationError
from .gate import GateConfig
from .metrics import evaluate_model, plot_rd, render_report, write_records
from .model import backbone_hash, load_checkpoint, load_checkpoint_dict
from .policy import PolicyKind
from .train import TrainConfig, pretrain_backbone, train_adapters

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


def backbone_path(run_dir: PathLike, q: int) -> Path:
    return Path(run_dir) / f"backbone_q{q}.pt"


def adapted_path(run_dir: PathLike, policy: str, q: int) -> Path:
    return Path(run_dir) / f"adapted_{policy}_q{q}.pt"


def write_resolved_config(run_dir: PathLike, config: dict, name: str = "resolved_config.json") -> Path:
    path = Path(run_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return path


def pretrain_qualities(
    source: DomainDataset,
    run_dir: PathLike,
    qualities: Sequence[int],
    M: int,
    N: int,
    config: TrainConfig,
    variant: str = "zou",
    chain: Optional[TrainConfig] = None,
) -> Dict[int, Path]:
    """One RD-trained backbone per quality index; existing checkpoints are kept.

    With ``chain`` set, only the lowest quality trains from scratch (with
    ``config``); each higher quality starts from the weights of the one below
    and trains with ``chain``.
    """
    out = {}
    prev = None
    for q in sorted(qualities):
        path = backbone_path(run_dir, q)
        if not path.exists():
            t0 = time.time()
            init = None if prev is None or chain is None else load_checkpoint_dict(prev)
            model, ckpt = pretrain_backbone(source, CodecConfig(M=M, N=N, quality_index=q),
                                            config if init is None else chain, variant,
                                            log_path=Path(run_dir) / f"pretrain_q{q}.jsonl", init_from=init)
            ckpt["meta"]["seconds"] = time.time() - t0
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(ckpt, path)
            log.info("pretrained q%d in %.0fs", q, time.time() - t0)
        out[q] = path
        prev = path
    return out


def adapt_qualities(
    backbones: Mapping[int, PathLike],
    dataset: DomainDataset,
    run_dir: PathLike,
    config: TrainConfig,
    policy: str = "proposed",
    gate_config: Optional[GateConfig] = None,
    gate_input: str = "y",
    init: str = "gaussian",
) -> Dict[int, Path]:
    """Adapter + gate training on top of each backbone checkpoint."""
    policy = PolicyKind.parse(policy).value
    out = {}
    for q, bpath in sorted(backbones.items()):
        path = adapted_path(run_dir, policy, q)
        if not path.exists():
            t0 = time.time()
            ckpt = load_checkpoint_dict(bpath)
            _, adapted = train_adapters(ckpt, dataset, config, policy, gate_config, gate_input, init,
                                        log_path=Path(run_dir) / f"adapt_{policy}_q{q}.jsonl")
            adapted["meta"]["seconds"] = time.time() - t0
            torch.save(adapted, path)
            log.info("adapted q%d (%s) in %.0fs", q, policy, time.time() - t0)
        out[q] = path
    return out


def test_sets(dataset: DomainDataset, split: str = "test") -> Dict[str, DomainDataset]:
    """One labeled dataset per domain, named after the domain."""
    ds = dataset.subset(split)
    groups = ds.by_domain()
    return {ds.domains[k]: DomainDataset(items, ds.domains, split) for k, items in groups.items() if items}


def evaluate_run(
    anchors: Mapping[int, PathLike],
    adapted: Mapping[str, Mapping[int, PathLike]],
    datasets: Mapping[str, DomainDataset],
    out_dir: PathLike,
    policy_quality: Optional[int] = None,
    method: str = "cubic",
    plot: bool = True,
) -> dict:
    """Evaluate checkpoints, then write report.json, report.txt and records.jsonl."""
    anchor_models = {q: load_checkpoint(p)[0] for q, p in anchors.items()}
    adapted_models = {pol: {q: load_checkpoint(p)[0] for q, p in by_q.items()} for pol, by_q in adapted.items()}
    report = evaluate_model(anchor_models, adapted_models, datasets, policy_quality, method)
    domains = next(iter(datasets.values())).domains if datasets else None
    report["domains"] = domains
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(render_report(report, domains))
    write_records(report, out / "records.jsonl")
    if plot:
        plot_rd(report, out / "rd.png")
    return report


# -- desk-scale preset ------------------------------------------------------------


def _desk_pretrain() -> TrainConfig:
    return TrainConfig(lr=3e-3, epochs=120, batch_size=8, patience=5, crop_size=64)


def _desk_chain() -> TrainConfig:
    return TrainConfig(lr=1e-3, epochs=40, batch_size=8, patience=5, crop_size=64)


def _desk_adapt() -> TrainConfig:
    return TrainConfig(gamma=0.5, lr=1e-3, epochs=70, batch_size=8, patience=5, crop_size=64)


@dataclass
class DeskPreset:
    """Tiny backbone, synthetic domains and short schedules for one CPU."""

    M: int = 32
    N: int = 32
    variant: str = "zou"
    qualities: List[int] = field(default_factory=lambda: [0, 1, 2, 3])
    domains: Dict[str, str] = field(default_factory=lambda: dict(DESK_DOMAINS))
    image_size: int = 256
    source_train: int = 240
    adapt_train: int = 160
    test_images: int = 8
    seed: int = 0
    pretrain: TrainConfig = field(default_factory=_desk_pretrain)
    pretrain_chain: Optional[TrainConfig] = field(default_factory=_desk_chain)
    adapt: TrainConfig = field(default_factory=_desk_adapt)
    init: str = "gaussian"
    gate_input: str = "y"
    policy_quality: int = 2
    extra_policies: List[str] = field(default_factory=lambda: ["top1", "oracle"])
    bd_method: str = "cubic"

    def __post_init__(self):
        if len(self.qualities) < 4:
            raise ConfigurationError("the desk preset needs at least 4 qualities for BD metrics")
        if self.policy_quality not in self.qualities:
            raise ConfigurationError(f"policy_quality {self.policy_quality} not among {self.qualities}")
        for p in self.extra_policies:
            PolicyKind.parse(p)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeskPreset":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown desk preset keys {sorted(unknown)}")
        d = dict(d)
        for key in ("pretrain", "pretrain_chain", "adapt"):
            if key in d and isinstance(d[key], Mapping):
                base = asdict(getattr(cls(), key) or TrainConfig())
                base.update(d[key])
                d[key] = TrainConfig(**base)
        return cls(**d)

    def source_dataset(self) -> DomainDataset:
        name, kind = next(iter(self.domains.items()))
        size = (self.image_size, self.image_size)
        return synthetic_dataset({name: kind}, {"train": self.source_train}, size, seed=self.seed)

    def adapt_dataset(self) -> DomainDataset:
        size = (self.image_size, self.image_size)
        return synthetic_dataset(self.domains, {"train": self.adapt_train}, size, seed=self.seed + 1)

    def test_dataset(self) -> DomainDataset:
        size = (self.image_size, self.image_size)
        return synthetic_dataset(self.domains, {"test": self.test_images}, size, seed=self.seed + 2)


def run_desk(
    run_dir: PathLike,
    preset: Optional[DeskPreset] = None,
    evaluate: bool = True,
    progress: Optional[Callable[[str], None]] = None,
) -> dict:
    """Pretrain, adapt and evaluate the desk-scale setup in ``run_dir``.

    Returns a dict with checkpoint paths, backbone hashes, timings and (when
    ``evaluate``) the report.
    """
    preset = preset or DeskPreset()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"command": "desk", **preset.to_dict()}
    cfg_path = run_dir / "resolved_config.json"
    if cfg_path.exists() and json.loads(cfg_path.read_text()) != json.loads(json.dumps(resolved)):
        raise ConfigurationError(f"{run_dir} holds a run with a different config; use a fresh directory")
    write_resolved_config(run_dir, resolved)
    say = progress or (lambda msg: log.info(msg))
    timings = {}
    torch.manual_seed(preset.seed)

    t0 = time.time()
    say("pretraining backbones")
    anchors = pretrain_qualities(preset.source_dataset(), run_dir, preset.qualities, preset.M, preset.N,
                                 preset.pretrain, preset.variant, preset.pretrain_chain)
    timings["pretrain"] = time.time() - t0
    hashes = {q: backbone_hash(load_checkpoint(p)[0]) for q, p in anchors.items()}

    t0 = time.time()
    adapt_ds = preset.adapt_dataset()
    say("training adapters (proposed)")
    adapted = {"proposed": adapt_qualities(anchors, adapt_ds, run_dir, preset.adapt, "proposed",
                                           gate_input=preset.gate_input, init=preset.init)}
    for pol in preset.extra_policies:
        say(f"training adapters ({pol})")
        adapted[pol] = adapt_qualities({preset.policy_quality: anchors[preset.policy_quality]}, adapt_ds,
                                       run_dir, preset.adapt, pol, gate_input=preset.gate_input, init=preset.init)
    timings["adapt"] = time.time() - t0

    result = {"run_dir": str(run_dir), "anchors": anchors, "adapted": adapted, "backbone_hashes": hashes,
              "timings": timings}
    if evaluate:
        t0 = time.time()
        say("evaluating")
        result["report"] = evaluate_run(anchors, adapted, test_sets(preset.test_dataset()), run_dir,
                                        preset.policy_quality, preset.bd_method)
        timings["evaluate"] = time.time() - t0
    (run_dir / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return result


def load_json_config(path: Optional[PathLike]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {p} must hold a JSON object")
    return data


def iter_checkpoints(run_dir: PathLike, prefix: str) -> Iterable[Path]:
    return sorted(Path(run_dir).glob(f"{prefix}*.pt"))
