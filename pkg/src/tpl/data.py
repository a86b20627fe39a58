"""Synthetic multi-domain image benchmark, its on-disk format, and DG splits.

Class identity is a procedural glyph drawn at a jittered position and scale.
Domain identity is a style: foreground/background colours, a per-channel
affine map, a background texture, additive noise and blur.  Each
(class, domain) cell draws from its own RNG stream seeded by
``(seed, class, domain)``.

Class and domain ids are 0-based.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

IMAGE_SIZE = 32
CHANNELS = 3
JITTER = 1.5  # max glyph offset from centre, pixels
MAGIC = b"TPLD"
VERSION = 1
MANIFEST_NAME = "manifest.json"
BUFFER_NAME = "data.tpld"


class DatasetFormatError(ValueError):
    """Malformed or inconsistent dataset files."""


# -- glyphs ---------------------------------------------------------------
_yy, _xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5


def _soft(x: np.ndarray) -> np.ndarray:
    """Anti-aliased step: 1 inside (x < 0), 0 outside."""
    return np.clip(0.5 - x, 0.0, 1.0)


def glyph(kind: int, cx: float, cy: float, r: float, angle: float = 0.0) -> np.ndarray:
    """Coverage mask in [0, 1] for glyph ``kind`` centred at (cx, cy) with radius ``r``."""
    x, y = _xx - cx, _yy - cy
    if angle:
        c, s = np.cos(angle), np.sin(angle)
        x, y = c * x + s * y, -s * x + c * y
    rad = np.hypot(x, y)
    box = np.maximum(np.abs(x), np.abs(y))
    bar = 0.28 * r
    k = kind % 8
    if k == 0:  # disk
        m = _soft(rad - r)
    elif k == 1:  # ring
        m = _soft(np.abs(rad - 0.75 * r) - 0.25 * r)
    elif k == 2:  # square
        m = _soft(box - 0.85 * r)
    elif k == 3:  # frame
        m = _soft(np.abs(box - 0.7 * r) - 0.2 * r)
    elif k == 4:  # plus
        m = np.maximum(_soft(np.abs(x) - bar) * _soft(np.abs(y) - r),
                       _soft(np.abs(y) - bar) * _soft(np.abs(x) - r))
    elif k == 5:  # saltire
        u, v = (x + y) / np.sqrt(2), (x - y) / np.sqrt(2)
        m = np.maximum(_soft(np.abs(u) - bar) * _soft(np.abs(v) - r),
                       _soft(np.abs(v) - bar) * _soft(np.abs(u) - r))
    elif k == 6:  # horizontal bars
        m = _soft(np.abs(np.abs(y) - 0.6 * r) - 0.22 * r) * _soft(np.abs(x) - r)
        m = np.maximum(m, _soft(np.abs(y) - 0.22 * r) * _soft(np.abs(x) - r))
    else:  # vertical bars
        m = _soft(np.abs(np.abs(x) - 0.6 * r) - 0.22 * r) * _soft(np.abs(y) - r)
        m = np.maximum(m, _soft(np.abs(x) - 0.22 * r) * _soft(np.abs(y) - r))
    if kind >= 8:
        # further classes: the base shape carved by a grating of class-specific orientation
        theta = np.pi * ((kind - 8) * 0.381966 % 1.0)
        grating = 0.5 + 0.5 * np.cos((np.cos(theta) * x + np.sin(theta) * y) * 1.2)
        m = m * grating
    return m


# -- domain styles --------------------------------------------------------
@dataclass(frozen=True)
class DomainStyle:
    foreground: tuple[float, float, float]
    background: tuple[float, float, float]
    gain: tuple[float, float, float]
    offset: tuple[float, float, float]
    texture_amp: float
    texture_freq: float
    texture_angle: float
    noise: float
    blur: float


_BASE_STYLES = [
    # plain: charcoal on beige, mild noise
    DomainStyle((0.15, 0.12, 0.1), (0.9, 0.85, 0.75), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.0, 0.0, 0.0, 0.03, 0.3),
    # painted: navy on yellow, diagonal stripes
    DomainStyle((0.1, 0.15, 0.45), (0.95, 0.9, 0.55), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.12, 0.9, 0.6, 0.04, 0.0),
    # cartoon: maroon on cyan, fine texture, strong noise
    DomainStyle((0.5, 0.05, 0.1), (0.6, 0.9, 0.9), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.15, 1.6, 1.9, 0.08, 0.0),
    # sketch: grey on white, heavy blur
    DomainStyle((0.35, 0.35, 0.4), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.08, 0.4, 2.7, 0.05, 1.0),
]


def domain_style(domain: int, seed: int) -> DomainStyle:
    if domain < len(_BASE_STYLES):
        return _BASE_STYLES[domain]
    rng = np.random.default_rng([seed, 10_000 + domain])
    fg, bg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return DomainStyle(tuple(fg), tuple(bg), tuple(rng.uniform(0.8, 1.2, 3)), tuple(rng.uniform(-0.1, 0.1, 3)),
                       float(rng.uniform(0, 0.25)), float(rng.uniform(0.3, 1.8)), float(rng.uniform(0, np.pi)),
                       float(rng.uniform(0.02, 0.1)), float(rng.uniform(0, 1.2)))


def render(kind: int, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """One (32, 32, 3) image in [0, 1]."""
    cx, cy = IMAGE_SIZE / 2 + rng.uniform(-JITTER, JITTER, size=2)
    r = 9.0 * rng.uniform(0.9, 1.05)
    mask = glyph(kind, cx, cy, r, angle=rng.uniform(-0.1, 0.1))
    if style.texture_amp:
        c, s = np.cos(style.texture_angle), np.sin(style.texture_angle)
        tex = style.texture_amp * np.sin(style.texture_freq * (c * _xx + s * _yy))
    else:
        tex = np.zeros_like(mask)
    fg = np.asarray(style.foreground)
    bg = np.asarray(style.background)
    img = bg + tex[..., None] * (1.0 - mask[..., None]) + mask[..., None] * (fg - bg)
    if style.blur:
        img = np.stack([gaussian_filter(img[..., ch], style.blur, mode="nearest") for ch in range(CHANNELS)], -1)
    img = img * np.asarray(style.gain) + np.asarray(style.offset)
    img = img + style.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


# -- dataset --------------------------------------------------------------
@dataclass
class DomainDataset:
    images: np.ndarray  # (N, 32, 32, 3) float32
    labels: np.ndarray  # (N,) uint16
    domains: np.ndarray  # (N,) uint16
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.manifest.get("n_classes", int(self.labels.max()) + 1))

    @property
    def n_domains(self) -> int:
        return int(self.manifest.get("n_domains", int(self.domains.max()) + 1))

    def cell_counts(self) -> dict[str, int]:
        counts = {}
        for c in range(self.n_classes):
            for m in range(self.n_domains):
                counts[f"{c},{m}"] = int(np.sum((self.labels == c) & (self.domains == m)))
        return counts

    def equals(self, other: "DomainDataset") -> bool:
        return (np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.domains, other.domains) and self.manifest == other.manifest)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Accuracy of assigning each test row to the class with the nearest training mean."""
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d2 = ((test_x[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(classes[np.argmin(d2, axis=1)] == test_y))


def shift_oracle(images, labels, domains) -> dict:
    """Nearest-centroid accuracy within each domain and from each domain to every other.

    Each cell is split in half by position; one half fits, the other half tests.
    """
    x = images.reshape(len(images), -1).astype(np.float64)
    first = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        for m in np.unique(domains):
            idx = np.flatnonzero((labels == c) & (domains == m))
            first[idx[: len(idx) // 2]] = True
    doms = [int(m) for m in np.unique(domains)]
    within, across = {}, {}
    for a in doms:
        fit = first & (domains == a)
        within[str(a)] = nearest_centroid_accuracy(x[fit], labels[fit], x[~first & (domains == a)],
                                              labels[~first & (domains == a)])
        for b in doms:
            if b != a:
                test = ~first & (domains == b)
                across[f"{a}->{b}"] = nearest_centroid_accuracy(x[fit], labels[fit], x[test], labels[test])
    return {
        "within_domain": within,
        "across_domain": across,
        "within_mean": float(np.mean(list(within.values()))),
        "across_mean": float(np.mean(list(across.values()))),
    }


def generate_synthetic(n_classes: int = 8, n_domains: int = 4, n_per_cell: int = 64, seed: int = 0,
                       with_oracle: bool = True) -> DomainDataset:
    if n_classes < 2 or n_domains < 3 or n_per_cell < 8:
        raise ValueError("need n_classes >= 2, n_domains >= 3 and n_per_cell >= 8")
    config = {"generator": "glyph-style-v1", "n_classes": n_classes, "n_domains": n_domains,
              "n_per_cell": n_per_cell, "seed": seed}
    images, labels, domains = [], [], []
    for m in range(n_domains):
        style = domain_style(m, seed)
        for c in range(n_classes):
            rng = np.random.default_rng([seed, c, m])
            images.extend(render(c, style, rng) for _ in range(n_per_cell))
            labels.extend([c] * n_per_cell)
            domains.extend([m] * n_per_cell)
    ds = DomainDataset(np.asarray(images, dtype=np.float32), np.asarray(labels, dtype=np.uint16),
                       np.asarray(domains, dtype=np.uint16))
    ds.manifest = {
        "format": "TPLD",
        "version": VERSION,
        "n_images": len(labels),
        "image_shape": [IMAGE_SIZE, IMAGE_SIZE, CHANNELS],
        "n_classes": n_classes,
        "n_domains": n_domains,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "counts": None,
    }
    ds.manifest["counts"] = ds.cell_counts()
    if with_oracle:
        ds.manifest["oracle"] = shift_oracle(ds.images, ds.labels, ds.domains)
    return ds


def _buffer_size(n: int) -> int:
    return len(MAGIC) + 1 + n * IMAGE_SIZE * IMAGE_SIZE * CHANNELS * 4 + n * 2 * 2


def save_dataset(ds: DomainDataset, path: str | os.PathLike) -> Path:
    """Write ``manifest.json`` and ``data.tpld`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n = len(ds)
    manifest = dict(ds.manifest)
    manifest["n_images"] = n
    manifest["buffer"] = BUFFER_NAME
    manifest["buffer_bytes"] = _buffer_size(n)
    blob = b"".join([MAGIC, bytes([VERSION]), ds.images.astype("<f4").tobytes(),
                     ds.labels.astype("<u2").tobytes(), ds.domains.astype("<u2").tobytes()])
    (path / BUFFER_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path: str | os.PathLike) -> DomainDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: missing {MANIFEST_NAME}") from None
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path / MANIFEST_NAME}: invalid JSON ({e})") from None
    try:
        blob = (path / manifest.get("buffer", BUFFER_NAME)).read_bytes()
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: missing buffer file") from None
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 5 or blob[4] != VERSION:
        raise DatasetFormatError(f"unsupported version {blob[4] if len(blob) > 4 else None}, expected {VERSION}")
    n = int(manifest["n_images"])
    expected = _buffer_size(n)
    if len(blob) != expected:
        raise DatasetFormatError(f"buffer holds {len(blob)} bytes, expected {expected} for {n} images")
    off = 5
    npx = n * IMAGE_SIZE * IMAGE_SIZE * CHANNELS
    images = np.frombuffer(blob, dtype="<f4", count=npx, offset=off).reshape(n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
    off += npx * 4
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=off)
    domains = np.frombuffer(blob, dtype="<u2", count=n, offset=off + 2 * n)
    ds = DomainDataset(images.astype(np.float32), labels.astype(np.uint16), domains.astype(np.uint16))
    manifest.pop("buffer", None)
    manifest.pop("buffer_bytes", None)
    ds.manifest = manifest
    if manifest.get("counts") is not None and ds.cell_counts() != manifest["counts"]:
        raise DatasetFormatError("manifest cell counts do not match the buffer contents")
    return ds


# -- splits ---------------------------------------------------------------
@dataclass
class SplitPlan:
    target: int
    val_fraction: float
    train: dict[int, np.ndarray]
    val: dict[int, np.ndarray]

    @property
    def sources(self) -> list[int]:
        return sorted(self.train)

    def train_indices(self) -> np.ndarray:
        return np.concatenate([self.train[m] for m in self.sources])

    def val_indices(self) -> np.ndarray:
        return np.concatenate([self.val[m] for m in self.sources])


def make_splits(ds: DomainDataset, target: int, val_fraction: float = 0.2, seed: int = 0) -> SplitPlan:
    """Stratified train/val split of every source domain; the target is left out entirely.

    Per (class, domain) cell of size n: ``floor(n * (1 - val_fraction))`` go to train
    and the rest to validation.
    """
    domains = np.asarray(ds.domains)
    labels = np.asarray(ds.labels)
    if target not in set(domains.tolist()):
        raise ValueError(f"target domain {target} not present in dataset")
    if not 0.0 < val_fraction < 0.5:
        raise ValueError("val_fraction must lie in (0, 0.5)")
    train, val = {}, {}
    for m in sorted(set(domains.tolist()) - {target}):
        tr, va = [], []
        for c in sorted(set(labels[domains == m].tolist())):
            idx = np.flatnonzero((domains == m) & (labels == c))
            rng = np.random.default_rng([seed, c, m, 7])
            idx = idx[rng.permutation(len(idx))]
            n_train = int(np.floor(len(idx) * (1.0 - val_fraction) + 1e-9))
            tr.append(np.sort(idx[:n_train]))
            va.append(np.sort(idx[n_train:]))
        train[m] = np.concatenate(tr)
        val[m] = np.concatenate(va)
    return SplitPlan(target, val_fraction, train, val)
