"""``licadapt`` command line: synth, pretrain, adapt, encode, decode, eval, report, desk.

Exit codes: 0 success, 1 other library error, 2 configuration, 3 data,
4 codec (including malformed streams), 5 compatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image as PILImage

from .bitstream import StreamMeta, decode_stream, encode_stream, entropy_tables
from .codec import Image
from .data import DESK_DOMAINS, ingest_directory, load_pixels, synthetic_dataset, write_synthetic_tree
from .errors import ConfigurationError, LicError
from .metrics import bpp, psnr, render_report
from .model import load_checkpoint, load_checkpoint_dict
from .pipeline import (
    DeskPreset,
    adapt_qualities,
    backbone_path,
    evaluate_run,
    iter_checkpoints,
    load_json_config,
    pretrain_qualities,
    run_desk,
    test_sets,
    write_resolved_config,
)
from .policy import PolicyKind
from .train import TrainConfig

log = logging.getLogger("licadapt")

POLICIES = [p.value for p in PolicyKind]


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    return dict(sec)


def _train_config(cfg: dict, section: str, args) -> TrainConfig:
    d = _section(cfg, section)
    for key in ("epochs", "lr", "gamma", "batch_size", "crop_size", "patience"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if args.seed is not None:
        d["seed"] = args.seed
    elif "seed" in cfg:
        d.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigurationError(f"bad [{section}] config: {exc}") from exc


def _dataset(cfg: dict, args):
    data = _section(cfg, "data")
    root = args.dataset or data.get("root")
    if root is None:
        raise ConfigurationError("no dataset given (--dataset or data.root in the config)")
    order = args.domain_order.split(",") if getattr(args, "domain_order", None) else data.get("domain_order")
    seed = data.get("split_seed", 0)
    ds = ingest_directory(root, data.get("source_domain", "natural"), order, seed,
                          data.get("val_fraction", 0.1), data.get("test_fraction", 0.1))
    data.update(root=str(root), domain_order=ds.domains, split_seed=seed)
    return ds, data


def _qualities(args, cfg) -> List[int]:
    if args.quality:
        return list(args.quality)
    return list(cfg.get("qualities", [0, 1, 2, 3]))


def _read_image(path) -> Image:
    return Image(load_pixels(str(path)), source_path=str(path))


def _write_png(path, pixels: np.ndarray) -> None:
    px = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(px, "RGB").save(path)


# -- commands -------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    size = (args.size, args.size)
    ds = synthetic_dataset(DESK_DOMAINS, {"train": args.count}, size, seed=seed)
    out = Path(args.out)
    write_synthetic_tree(out, ds)
    ds.write_manifest(out / "manifest.tsv")
    write_resolved_config(out, {"command": "synth", "seed": seed, "size": list(size), "count": args.count,
                                "domains": DESK_DOMAINS})
    print(f"wrote {len(ds)} images to {out}")
    return 0


def cmd_pretrain(args, cfg) -> int:
    ds, data = _dataset(cfg, args)
    codec = _section(cfg, "codec")
    M, N = args.M or codec.get("M", 32), args.N or codec.get("N", 32)
    variant = args.variant or codec.get("variant", "zou")
    tcfg = _train_config(cfg, "pretrain", args)
    qualities = _qualities(args, cfg)
    source = ds.subset("train")
    source = type(ds)([it for it in source.items if it.label == 0], ds.domains[:1], "train")
    if len(source) == 0:
        raise ConfigurationError("no source-domain training images")
    chain = None
    if args.warm_start or "pretrain_chain" in cfg:
        try:
            chain = TrainConfig(**{**asdict(tcfg), **_section(cfg, "pretrain_chain")})
        except TypeError as exc:
            raise ConfigurationError(f"bad [pretrain_chain] config: {exc}") from exc
    out = Path(args.out)
    write_resolved_config(out, {"command": "pretrain", "data": data, "qualities": qualities,
                                "codec": {"M": M, "N": N, "variant": variant}, "pretrain": asdict(tcfg),
                                "pretrain_chain": None if chain is None else asdict(chain)})
    paths = pretrain_qualities(source, out, qualities, M, N, tcfg, variant, chain)
    for q, p in paths.items():
        print(f"q{q}: {p}")
    return 0


def cmd_adapt(args, cfg) -> int:
    ds, data = _dataset(cfg, args)
    tcfg = _train_config(cfg, "adapt", args)
    policy = PolicyKind.parse(args.blend).value
    qualities = _qualities(args, cfg)
    src = Path(args.backbone)
    backbones = {q: backbone_path(src, q) for q in qualities} if src.is_dir() else None
    if backbones is None:
        q = load_checkpoint_dict(src)["codec_config"]["quality_index"]
        backbones = {q: src}
    for q, p in backbones.items():
        if not Path(p).is_file():
            raise ConfigurationError(f"backbone checkpoint for quality {q} not found at {p}")
    out = Path(args.out)
    init = args.init or _section(cfg, "adapt_bank").get("init", "gaussian")
    write_resolved_config(out, {"command": "adapt", "data": data, "blend": policy, "init": init,
                                "backbones": {q: str(p) for q, p in backbones.items()}, "adapt": asdict(tcfg)},
                          name=f"resolved_config_adapt_{policy}.json")
    paths = adapt_qualities(backbones, ds, out, tcfg, policy, init=init)
    for q, p in paths.items():
        _, meta = load_checkpoint(p)
        acc = [r["gate_acc"] for r in meta.get("metric_log", []) if r["split"] == "val"]
        tail = f" (val gate accuracy {acc[-1]:.3f})" if acc else ""
        print(f"q{q}: {p}{tail}")
    return 0


def cmd_encode(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    image = _read_image(args.image)
    adapted = model.K is not None
    policy = PolicyKind.parse(args.blend).value if adapted else None
    if policy == "oracle" and args.label is None:
        raise ConfigurationError("--blend oracle needs --label")
    y_hat, _, weights, (h, w) = model.analyse(image, policy or "proposed", args.label)
    meta = StreamMeta(h, w, model.config.quality_index, model.K if adapted else 0, policy)
    stream = encode_stream(y_hat, weights, meta, entropy_tables(model.backbone.entropy))
    out = Path(args.out)
    out.write_bytes(stream)
    write_resolved_config(out.parent, {"command": "encode", "image": str(args.image), "checkpoint": str(args.checkpoint),
                                       "blend": policy, "label": args.label, "out": str(out)},
                          name=out.name + ".config.json")
    print(f"bpp {bpp(stream, h, w):.6f}")
    return 0


def cmd_decode(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data = Path(args.stream).read_bytes()
    y_hat, weights, meta = decode_stream(data, model, force=args.force)
    pixels = model.synthesize(y_hat, weights, (meta.height, meta.width))
    out = Path(args.out)
    _write_png(out, pixels)
    write_resolved_config(out.parent, {"command": "decode", "stream": str(args.stream),
                                       "checkpoint": str(args.checkpoint), "force": args.force, "out": str(out)},
                          name=out.name + ".config.json")
    if args.reference:
        print(f"psnr {psnr(_read_image(args.reference).pixels, pixels):.4f}")
    return 0


def cmd_eval(args, cfg) -> int:
    ds, data = _dataset(cfg, args)
    runs = Path(args.runs)
    anchors = {}
    for p in iter_checkpoints(runs, "backbone_q"):
        anchors[int(p.stem.rsplit("_q", 1)[1])] = p
    adapted = {}
    for pol in POLICIES:
        by_q = {int(p.stem.rsplit("_q", 1)[1]): p for p in iter_checkpoints(runs, f"adapted_{pol}_q")}
        if by_q:
            adapted[pol] = by_q
    if len(anchors) < 4:
        raise ConfigurationError(f"{runs} holds {len(anchors)} backbone checkpoints; BD metrics need 4")
    datasets = test_sets(ds, args.split)
    out = Path(args.out)
    write_resolved_config(out, {"command": "eval", "data": data, "runs": str(runs), "split": args.split,
                                "policy_quality": args.policy_quality, "method": args.method},
                          name="resolved_config_eval.json")
    report = evaluate_run(anchors, adapted, datasets, out, args.policy_quality, args.method, plot=not args.no_plot)
    print(render_report(report, report.get("domains")), end="")
    return 0


def cmd_report(args, cfg) -> int:
    path = Path(args.report)
    if not path.is_file():
        raise ConfigurationError(f"report {path} not found")
    report = json.loads(path.read_text())
    print(render_report(report, report.get("domains")), end="")
    return 0


def cmd_desk(args, cfg) -> int:
    preset_cfg = _section(cfg, "desk")
    if args.seed is not None:
        preset_cfg["seed"] = args.seed
    preset = DeskPreset.from_dict(preset_cfg)
    result = run_desk(args.out, preset, progress=print)
    print(render_report(result["report"], result["report"].get("domains")), end="")
    return 0


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="licadapt", description="Domain-adaptive learned image compression.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        if dataset:
            p.add_argument("--dataset", help="root directory holding <domain>/*.png")
            p.add_argument("--domain-order", help="comma-separated domain names, source first")
        return p

    p = common(sub.add_parser("synth", help="write synthetic domain images"))
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--count", type=int, default=40, help="images per domain")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("pretrain", help="RD-train one backbone per quality"), dataset=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quality", type=int, action="append")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--crop-size", dest="crop_size", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--variant", choices=["zou", "cheng"])
    p.add_argument("--warm-start", dest="warm_start", action="store_true",
                   help="start each quality from the weights of the next lower one")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("adapt", help="train adapters and gate on frozen backbones"), dataset=True)
    p.add_argument("--backbone", required=True, help="run directory or a single backbone checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--blend", choices=POLICIES, default="proposed")
    p.add_argument("--quality", type=int, action="append")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--crop-size", dest="crop_size", type=int)
    p.add_argument("--init", choices=["gaussian", "zero"])
    p.set_defaults(func=cmd_adapt)

    p = common(sub.add_parser("encode", help="compress one PNG to a .licb stream"))
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--blend", choices=POLICIES, default="proposed")
    p.add_argument("--label", type=int, help="domain label (oracle policy)")
    p.set_defaults(func=cmd_encode)

    p = common(sub.add_parser("decode", help="reconstruct a .licb stream to PNG"))
    p.add_argument("stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="original PNG; prints PSNR")
    p.add_argument("--force", action="store_true", help="decode adapter-free on a K mismatch")
    p.set_defaults(func=cmd_decode)

    p = common(sub.add_parser("eval", help="BD metrics, gate statistics and policy table"), dataset=True)
    p.add_argument("--runs", required=True, help="directory with backbone_q*.pt and adapted_*_q*.pt")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--policy-quality", dest="policy_quality", type=int)
    p.add_argument("--method", choices=["cubic", "pchip"], default="cubic")
    p.add_argument("--no-plot", dest="no_plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("report", help="print the tables of a report.json"))
    p.add_argument("report")
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("desk", help="run the desk-scale preset end to end"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_desk)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        cfg = load_json_config(args.config)
        return args.func(args, cfg)
    except LicError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
