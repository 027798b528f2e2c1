"""PSNR, bits per pixel, RD curves and Bjøntegaard deltas; evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import PchipInterpolator

from .adapters import parameter_count
from .bitstream import StreamMeta, decode_stream, encode_stream, entropy_tables
from .codec import Image
from .data import DomainDataset
from .errors import ArityError, ConfigurationError, ContractError, LicError, NoOverlapError
from .gate import gate_parameter_count

PSNR_CAP = 100.0


def to_8bit(px: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(px, dtype=np.float64), 0.0, 1.0) * 255.0)


def psnr(x, x_hat) -> float:
    """PSNR in dB after rounding both images to 8 bits; +inf when identical."""
    a, b = to_8bit(x), to_8bit(x_hat)
    if a.shape != b.shape:
        raise ContractError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def capped(value: float) -> float:
    return min(value, PSNR_CAP)


def bpp(stream: bytes, height: int, width: int) -> float:
    return 8.0 * len(stream) / (height * width)


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr_db: float

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and math.isfinite(self.psnr_db)) or self.bpp <= 0:
            raise ContractError(f"invalid RD point ({self.bpp}, {self.psnr_db})")


class RDCurve:
    """At least four points, strictly increasing in both rate and PSNR."""

    def __init__(self, points: Sequence[RDPoint], label: str = ""):
        pts = sorted(points, key=lambda p: p.bpp)
        if len(pts) < 4:
            raise ArityError(f"RD curve {label!r} has {len(pts)} points, need at least 4")
        for a, b in zip(pts, pts[1:]):
            if not (b.bpp > a.bpp and b.psnr_db > a.psnr_db):
                raise ContractError(f"RD curve {label!r} is not strictly increasing: {a} -> {b}")
        self.points = pts
        self.label = label

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[float, float]], label: str = "") -> "RDCurve":
        """Build from (bpp, psnr) pairs, dropping infinite-PSNR points."""
        return cls([RDPoint(r, p) for r, p in pairs if math.isfinite(p)], label)

    @property
    def log_rate(self) -> np.ndarray:
        return np.log10([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr_db for p in self.points])


def _average(x: np.ndarray, y: np.ndarray, lo: float, hi: float, method: str) -> float:
    """Mean of the curve through (x, y) over [lo, hi]."""
    if method == "cubic":
        antideriv = Polynomial.fit(x, y, 3).integ()
        return (antideriv(hi) - antideriv(lo)) / (hi - lo)
    if method == "pchip":
        order = np.argsort(x)
        return PchipInterpolator(x[order], y[order]).integrate(lo, hi) / (hi - lo)
    raise ConfigurationError(f"unknown BD interpolation {method!r}")


def _overlap(a: np.ndarray, b: np.ndarray, what: str) -> Tuple[float, float]:
    lo, hi = max(a.min(), b.min()), min(a.max(), b.max())
    if not hi > lo:
        raise NoOverlapError(f"RD curves do not overlap in {what}")
    return lo, hi


def bd_rate(anchor: RDCurve, test: RDCurve, method: str = "cubic") -> float:
    """Average rate difference (%) of ``test`` vs ``anchor`` at equal PSNR."""
    lo, hi = _overlap(anchor.psnr, test.psnr, "PSNR")
    delta = _average(test.psnr, test.log_rate, lo, hi, method) - _average(anchor.psnr, anchor.log_rate, lo, hi, method)
    return (10.0 ** delta - 1.0) * 100.0


def bd_psnr(anchor: RDCurve, test: RDCurve, method: str = "cubic") -> float:
    """Average PSNR difference (dB) of ``test`` vs ``anchor`` at equal rate."""
    lo, hi = _overlap(anchor.log_rate, test.log_rate, "rate")
    return _average(test.log_rate, test.psnr, lo, hi, method) - _average(anchor.log_rate, anchor.psnr, lo, hi, method)


def bd_metrics(anchor: RDCurve, test: RDCurve, method: str = "cubic") -> Tuple[float, float]:
    return bd_rate(anchor, test, method), bd_psnr(anchor, test, method)


# -- evaluation -------------------------------------------------------------------


def code_image(model, image: Image, policy: Optional[str] = None, label: Optional[int] = None,
               force: bool = False) -> dict:
    """Encode ``image`` to bytes, decode it back, and measure it."""
    y_hat, v, weights, (h, w) = model.analyse(image, policy or "proposed", label)
    adapted = model.K is not None and policy is not None
    meta = StreamMeta(h, w, model.config.quality_index, model.K if adapted else 0,
                      policy if adapted else None)
    stream = encode_stream(y_hat, weights if adapted else None, meta, entropy_tables(model.backbone.entropy))
    y_dec, w_dec, _ = decode_stream(stream, model, force=force)
    x_hat = model.synthesize(y_dec, w_dec, (h, w))
    return {
        "stream": stream,
        "bpp": bpp(stream, h, w),
        "psnr": psnr(image.pixels, x_hat),
        "v": None if v is None else v.double().numpy(),
        "x_hat": x_hat,
    }


def _curve_or_error(pairs, label):
    try:
        return RDCurve.from_pairs(pairs, label), None
    except LicError as exc:
        return None, str(exc)


def evaluate_model(
    anchors: Mapping[int, object],
    adapted: Mapping[str, Mapping[int, object]],
    datasets: Mapping[str, DomainDataset],
    policy_quality: Optional[int] = None,
    method: str = "cubic",
) -> dict:
    """Measure anchor and adapted checkpoints on every dataset.

    Args:
        anchors: quality index -> adapter-free model (the BD anchor).
        adapted: policy name -> quality index -> model trained with that policy.
            Policies with fewer than four qualities only enter the PSNR table.
        datasets: name -> labeled test images.
        policy_quality: quality index of the per-policy PSNR table (defaults
            to the second highest available).

    Returns:
        JSON-serializable report dict (see :func:`render_report`).
    """
    if len(anchors) < 4:
        raise ConfigurationError(f"need at least 4 anchor qualities, got {len(anchors)}")
    qualities = sorted(anchors)
    if policy_quality is None:
        policy_quality = qualities[-2]
    records: List[dict] = []
    report: dict = {"qualities": qualities, "policy_quality": policy_quality, "bd_method": method, "datasets": {}}

    for name, ds in datasets.items():
        if len(ds) == 0:
            raise ConfigurationError(f"dataset {name!r} is empty")
        images = ds.images()
        entry = {"n_images": len(images), "anchor": [], "policies": {}, "errors": {}}

        for q in qualities:
            res = [code_image(anchors[q], im) for im in images]
            pt = {"quality": q, "bpp": float(np.mean([r["bpp"] for r in res])),
                  "psnr": float(np.mean([capped(r["psnr"]) for r in res]))}
            entry["anchor"].append(pt)
            records.append({"dataset": name, "policy": "anchor", **pt})

        anchor_curve, err = _curve_or_error([(p["bpp"], p["psnr"]) for p in entry["anchor"]], f"{name}/anchor")
        if err:
            entry["errors"]["anchor"] = err

        for policy, by_q in adapted.items():
            pol = {"points": [], "mean_v": {}, "gate_acc": {}}
            for q in sorted(by_q):
                res = [code_image(by_q[q], im, policy, im.domain_label) for im in images]
                vs = np.stack([r["v"] for r in res])
                labels = np.array([im.domain_label for im in images])
                pt = {"quality": q, "bpp": float(np.mean([r["bpp"] for r in res])),
                      "psnr": float(np.mean([capped(r["psnr"]) for r in res]))}
                pol["points"].append(pt)
                pol["mean_v"][str(q)] = vs.mean(axis=0).tolist()
                pol["gate_acc"][str(q)] = float(np.mean(vs.argmax(axis=1) == labels))
                records.append({"dataset": name, "policy": policy, **pt})
            if len(by_q) >= 4 and anchor_curve is not None:
                curve, err = _curve_or_error([(p["bpp"], p["psnr"]) for p in pol["points"]], f"{name}/{policy}")
                if err:
                    entry["errors"][policy] = err
                else:
                    try:
                        pol["bd_rate"], pol["bd_psnr"] = bd_metrics(anchor_curve, curve, method)
                    except LicError as exc:
                        entry["errors"][policy] = str(exc)
            entry["policies"][policy] = pol
        report["datasets"][name] = entry

    table = {}
    for name, entry in report["datasets"].items():
        row = {"reference": next(p["psnr"] for p in entry["anchor"] if p["quality"] == policy_quality)}
        for policy, pol in entry["policies"].items():
            for p in pol["points"]:
                if p["quality"] == policy_quality:
                    row[policy] = p["psnr"]
        table[name] = row
    report["policy_table"] = table
    report["records"] = records

    any_model = next(iter(next(iter(adapted.values())).values()), None) if adapted else None
    if any_model is not None and any_model.bank is not None:
        dec = parameter_count(any_model.backbone.g_s)
        enc = parameter_count(any_model.backbone.g_a)
        n_ad = parameter_count(any_model.bank)
        n_gate = gate_parameter_count(any_model.gate.config)
        report["parameters"] = {
            "adapters": n_ad, "decoder": dec, "adapter_to_decoder": n_ad / dec,
            "gate": n_gate, "encoder": enc, "gate_to_encoder": n_gate / enc,
        }
    return report


def render_report(report: dict, domains: Optional[Sequence[str]] = None) -> str:
    """Plain-text tables: BD metrics, mean gate weights, per-policy PSNR."""
    lines = []
    order = [d for d in (domains or []) if d in report["datasets"]]
    order += sorted(set(report["datasets"]) - set(order))
    pols = sorted({p for e in report["datasets"].values() for p in e["policies"]})
    lines.append("BD metrics vs adapter-free backbone (%s fit)" % report["bd_method"])
    lines.append(f"{'dataset':<12} {'policy':<10} {'BD-Rate %':>10} {'BD-PSNR dB':>11}")
    for name in order:
        e = report["datasets"][name]
        if "anchor" in e["errors"]:
            lines.append(f"{name:<12} {'anchor':<10} error: {e['errors']['anchor']}")
        for p in pols:
            pol = e["policies"].get(p, {})
            if "bd_rate" in pol:
                lines.append(f"{name:<12} {p:<10} {pol['bd_rate']:>10.3f} {pol['bd_psnr']:>11.4f}")
            elif p in e["errors"]:
                lines.append(f"{name:<12} {p:<10} error: {e['errors'][p]}")
    q = report["policy_quality"]
    lines.append("")
    lines.append(f"Mean gate distribution v (quality {q})")
    for name in order:
        e = report["datasets"][name]
        pol = e["policies"].get("proposed") or next(iter(e["policies"].values()), None)
        if pol and str(q) in pol["mean_v"]:
            v = pol["mean_v"][str(q)]
            heads = domains or [f"d{k}" for k in range(len(v))]
            cells = "  ".join(f"{h}={x:.3f}" for h, x in zip(heads, v))
            lines.append(f"{name:<12} {cells}  (sum={sum(v):.6f}, acc={pol['gate_acc'][str(q)]:.3f})")
    lines.append("")
    lines.append(f"PSNR by blending policy (quality {q})")
    cols = ["reference"] + [p for p in ("proposed", "top1", "oracle") if p in pols]
    lines.append(f"{'dataset':<12} " + " ".join(f"{c:>10}" for c in cols))
    for name in order:
        row = report["policy_table"][name]
        lines.append(f"{name:<12} " + " ".join(f"{row[c]:>10.3f}" if c in row else f"{'-':>10}" for c in cols))
    if "parameters" in report:
        p = report["parameters"]
        lines.append("")
        lines.append(f"adapters: {p['adapters']} params ({100 * p['adapter_to_decoder']:.1f}% of decoder); "
                     f"gate: {p['gate']} params ({100 * p['gate_to_encoder']:.2f}% of encoder)")
    return "\n".join(lines) + "\n"


def write_records(report: dict, path) -> None:
    with open(path, "w") as fh:
        for rec in report["records"]:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def plot_rd(report: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report["datasets"])
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.5), squeeze=False)
    for ax, name in zip(axes[0], names):
        e = report["datasets"][name]
        ax.plot([p["bpp"] for p in e["anchor"]], [p["psnr"] for p in e["anchor"]], "o-", label="reference")
        for pol, d in e["policies"].items():
            if len(d["points"]) >= 2:
                ax.plot([p["bpp"] for p in d["points"]], [p["psnr"] for p in d["points"]], "s--", label=pol)
        ax.set_title(name)
        ax.set_xlabel("bpp")
        ax.set_ylabel("PSNR [dB]")
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
