"""Labeled multi-domain datasets: directory ingestion and synthetic domains."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image as PILImage
from PIL import ImageDraw
from scipy.ndimage import gaussian_filter

from .codec import Image
from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

SYNTHETIC_KINDS = ("smooth-texture", "line-sketch", "flat-regions")
DESK_DOMAINS = {"natural": "smooth-texture", "sketch": "line-sketch", "comic": "flat-regions"}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticDomainSpec:
    kind: str
    seed: int = 0
    size: Tuple[int, int] = (64, 64)
    count: int = 1

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ConfigurationError(f"unknown synthetic kind {self.kind!r}")
        if min(self.size) < 64:
            raise ConfigurationError(f"synthetic images must be at least 64x64, got {self.size}")


@dataclass(frozen=True)
class SyntheticRef:
    """One generated image: ``kind`` drawn with (seed, index) at ``size``."""

    kind: str
    seed: int
    index: int
    size: Tuple[int, int]

    def __str__(self) -> str:
        return f"synthetic:{self.kind}/{self.seed}/{self.index}@{self.size[0]}x{self.size[1]}"


@dataclass(frozen=True)
class DomainItem:
    source: Union[str, SyntheticRef]
    label: int
    split: str = "train"


@dataclass
class DomainDataset:
    items: List[DomainItem]
    domains: List[str]
    split: Optional[str] = None

    def __post_init__(self):
        for it in self.items:
            if not 0 <= it.label <= self.K:
                raise DataError(f"label {it.label} outside [0, {self.K}] for {it.source}")

    @property
    def K(self) -> int:
        return len(self.domains) - 1

    def __len__(self) -> int:
        return len(self.items)

    def subset(self, split: str) -> "DomainDataset":
        return DomainDataset([it for it in self.items if it.split == split], self.domains, split)

    def labels(self) -> List[int]:
        return [it.label for it in self.items]

    def by_domain(self) -> Dict[int, List[DomainItem]]:
        out: Dict[int, List[DomainItem]] = {k: [] for k in range(self.K + 1)}
        for it in self.items:
            out[it.label].append(it)
        return out

    def require_all_labels(self) -> None:
        missing = sorted(set(range(self.K + 1)) - set(self.labels()))
        if missing:
            names = [self.domains[k] for k in missing]
            raise ConfigurationError(f"dataset has no images for domain(s) {names}")

    def load(self, item: DomainItem) -> Image:
        return Image(load_pixels(item.source), source_path=str(item.source), domain_label=item.label)

    def images(self) -> List[Image]:
        return [self.load(it) for it in self.items]

    def write_manifest(self, path: Union[str, Path]) -> None:
        lines = [f"{it.split}\t{it.label}\t{self.domains[it.label]}\t{it.source}" for it in self.items]
        Path(path).write_text("\n".join(lines) + "\n")


# -- synthesis ---------------------------------------------------------------


def _rng(kind: str, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SYNTHETIC_KINDS.index(kind), index])


def _smooth_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # luminance-dominated like natural photos: one shared field plus weaker chroma
    noise = rng.standard_normal((h, w, 3))
    field_ = np.stack([gaussian_filter(noise[..., c], 4.0, mode="wrap") for c in range(3)], axis=-1)
    field_ /= field_.std(axis=(0, 1), keepdims=True) + 1e-12
    mix = np.eye(3) * rng.uniform(0.2, 0.4) + np.ones((3, 3)) / np.sqrt(3)
    field_ = field_ @ mix.T
    base = rng.uniform(0.3, 0.7, size=3)
    contrast = rng.uniform(0.06, 0.12)
    return np.clip(base + contrast * field_, 0.0, 1.0)


def _line_sketch(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    canvas = PILImage.new("L", (w, h), 255)
    n_strokes = int(rng.integers(10, 41))
    width = max(1, min(h, w) // 128)
    for _ in range(n_strokes):
        n_pts = int(rng.integers(2, 6))
        pts = [(float(rng.uniform(0, w)), float(rng.uniform(0, h)))]
        for _ in range(n_pts - 1):
            ang = rng.uniform(0, 2 * np.pi)
            step = rng.uniform(0.03, 0.12) * min(h, w)
            x, y = pts[-1]
            pts.append((float(np.clip(x + step * np.cos(ang), 0, w - 1)),
                        float(np.clip(y + step * np.sin(ang), 0, h - 1))))
        tone = int(rng.integers(0, 90))
        trial = canvas.copy()
        ImageDraw.Draw(trial).line(pts, fill=tone, width=width)
        if np.mean(np.asarray(trial) >= 230) < 0.85:
            break  # keep the canvas mostly white
        canvas = trial
    gray = np.asarray(canvas, dtype=np.float64) / 255.0
    return np.repeat(gray[..., None], 3, axis=-1)


def _flat_regions(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    n_cells = int(rng.integers(8, 25))
    centers = rng.uniform(0, 1, size=(n_cells, 2)) * np.array([h, w])
    colors = rng.uniform(0.15, 1.0, size=(n_cells, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    cell = np.argmin(d, axis=-1)
    img = colors[cell]
    border = np.zeros((h, w), dtype=bool)
    border[:, :-1] |= cell[:, :-1] != cell[:, 1:]
    border[:-1, :] |= cell[:-1, :] != cell[1:, :]
    img[border] = 0.05
    return img


_GENERATORS = {
    "smooth-texture": _smooth_texture,
    "line-sketch": _line_sketch,
    "flat-regions": _flat_regions,
}


def synthesize_one(kind: str, seed: int, index: int, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    return _GENERATORS[kind](_rng(kind, seed, index), h, w).astype(np.float32)


def synthesize(spec: SyntheticDomainSpec) -> Iterator[Image]:
    for i in range(spec.count):
        ref = SyntheticRef(spec.kind, spec.seed, i, tuple(spec.size))
        yield Image(load_pixels(ref), source_path=str(ref))


@lru_cache(maxsize=1536)
def _load_cached(source) -> np.ndarray:
    if isinstance(source, SyntheticRef):
        px = synthesize_one(source.kind, source.seed, source.index, source.size)
    else:
        with PILImage.open(source) as im:
            if im.mode != "RGB":
                raise DataError(f"{source}: mode {im.mode} is not RGB")
            px = np.asarray(im, dtype=np.float32) / 255.0
    px.setflags(write=False)
    return px


def load_pixels(source) -> np.ndarray:
    try:
        return _load_cached(source)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read image {source}: {exc}") from exc


# -- dataset construction ------------------------------------------------------


def _split_of(key: str, seed: int, val_fraction: float, test_fraction: float) -> str:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0 ** 64
    if u < test_fraction:
        return "test"
    if u < test_fraction + val_fraction:
        return "val"
    return "train"


def ingest_directory(
    root: Union[str, Path],
    source_domain: str = "natural",
    domain_order: Optional[Sequence[str]] = None,
    seed: int = 0,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
) -> DomainDataset:
    """Read ``root/<domain>/*.png``.

    Label 0 goes to ``source_domain``; the rest follow ``domain_order`` when
    given, else sorted directory names. Splits come from a seeded hash of
    ``<domain>/<filename>`` so they are stable under file additions.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} is not a directory")
    dirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    if source_domain not in dirs:
        raise ConfigurationError(f"source domain directory {source_domain!r} missing under {root}")
    if domain_order is None:
        domains = [source_domain] + [d for d in dirs if d != source_domain]
    else:
        domains = list(domain_order)
        if domains[0] != source_domain or sorted(domains) != dirs:
            raise ConfigurationError(f"domain_order {domains} must list {dirs} with {source_domain!r} first")
    items: List[DomainItem] = []
    for label, name in enumerate(domains):
        n_ok = 0
        for path in sorted((root / name).glob("*.png")):
            try:
                load_pixels(str(path))
            except DataError as exc:
                log.warning("skipping %s", exc)
                continue
            split = _split_of(f"{name}/{path.name}", seed, val_fraction, test_fraction)
            items.append(DomainItem(str(path), label, split))
            n_ok += 1
        if n_ok == 0:
            raise ConfigurationError(f"domain directory {name!r} has no readable RGB PNG images")
    ds = DomainDataset(items, domains)
    ds.subset("train").require_all_labels()
    return ds


def synthetic_dataset(
    domains: Dict[str, str] = DESK_DOMAINS,
    counts: Dict[str, int] = None,
    size: Tuple[int, int] = (64, 64),
    seed: int = 0,
) -> DomainDataset:
    """Synthetic labeled dataset; ``counts`` maps split -> images per domain."""
    counts = counts or {"train": 100}
    items: List[DomainItem] = []
    offset = 0
    for split in SPLITS:
        n = counts.get(split, 0)
        for label, (name, kind) in enumerate(domains.items()):
            for i in range(n):
                items.append(DomainItem(SyntheticRef(kind, seed, offset + i, tuple(size)), label, split))
        offset += n
    return DomainDataset(items, list(domains))


def write_synthetic_tree(root: Union[str, Path], ds: DomainDataset) -> None:
    """Materialize a dataset as ``root/<domain>/NNNNN.png``."""
    root = Path(root)
    for n, it in enumerate(ds.items):
        d = root / ds.domains[it.label]
        d.mkdir(parents=True, exist_ok=True)
        px = np.round(load_pixels(it.source) * 255.0).astype(np.uint8)
        PILImage.fromarray(px, "RGB").save(d / f"{n:05d}.png")


# -- batching -----------------------------------------------------------------


def balanced_order(ds: DomainDataset, rng: np.random.Generator) -> List[DomainItem]:
    """One epoch of items with every domain drawn equally often.

    The epoch has len(ds) items; each domain contributes len(ds) // (K+1)
    (+1 for the first remainder domains), cycling its own shuffled items.
    """
    groups = {k: v for k, v in ds.by_domain().items() if v}
    if not groups:
        return []
    n = len(ds)
    per = {k: n // len(groups) + (1 if i < n % len(groups) else 0) for i, k in enumerate(sorted(groups))}
    picks = []
    for k in sorted(groups):
        members = groups[k]
        idx = np.concatenate([rng.permutation(len(members)) for _ in range(-(-per[k] // len(members)))])
        picks.extend(members[j] for j in idx[: per[k]])
    order = rng.permutation(len(picks))
    return [picks[j] for j in order]


def _crop(px: np.ndarray, crop: Optional[int], rng: Optional[np.random.Generator]) -> np.ndarray:
    if crop is None:
        return px
    h, w = px.shape[:2]
    if crop > min(h, w):
        raise DataError(f"crop {crop} larger than image {h}x{w}")
    if rng is None:
        top, left = (h - crop) // 2, (w - crop) // 2
    else:
        top, left = int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))
    return px[top: top + crop, left: left + crop]


def batch_iterator(
    ds: DomainDataset,
    batch_size: int,
    crop: Optional[int] = 64,
    augment: bool = True,
    seed: Union[int, np.random.Generator] = 0,
    balanced: bool = True,
) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Yield (N,3,crop,crop float tensor, N long labels) for one epoch.

    ``seed`` may be a Generator, which is advanced in place (resumable runs).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = balanced_order(ds, rng) if balanced else [ds.items[j] for j in rng.permutation(len(ds))]
    for start in range(0, len(order), batch_size):
        chunk = order[start: start + batch_size]
        imgs = []
        for it in chunk:
            px = _crop(load_pixels(it.source), crop, rng)
            if augment and rng.random() < 0.5:
                px = px[:, ::-1]
            imgs.append(np.ascontiguousarray(px.transpose(2, 0, 1)))
        yield torch.from_numpy(np.stack(imgs)), torch.tensor([it.label for it in chunk], dtype=torch.long)


def eval_batches(ds: DomainDataset, batch_size: int, crop: Optional[int]):
    """Deterministic center-cropped batches in dataset order."""
    for start in range(0, len(ds), batch_size):
        chunk = ds.items[start: start + batch_size]
        imgs = [np.ascontiguousarray(_crop(load_pixels(it.source), crop, None).transpose(2, 0, 1)) for it in chunk]
        yield torch.from_numpy(np.stack(imgs)), torch.tensor([it.label for it in chunk], dtype=torch.long)
