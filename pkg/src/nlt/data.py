"""Procedural dot-crowd scenes for two visually different domains.

Each scene is a grayscale image of Gaussian "people" blobs over a flat or
ramped background, plus the point annotations and a ground-truth density map
built from unit-mass truncated Gaussian kernels. Everything is a pure
function of ``(DomainSpec, seed)``.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DomainSpec",
    "Sample",
    "DatasetSplit",
    "SOURCE_DOMAIN",
    "TARGET_DOMAIN",
    "SIGMA_GT",
    "generate_scene",
    "density_from_points",
    "build_split",
    "scene_regularization",
    "stack",
    "dump_split",
    "load_split",
]

SIGMA_GT = 4.0
BLOB_PEAK = 0.6


@dataclass(frozen=True)
class DomainSpec:
    name: str
    count_range: tuple[int, int]
    blob_sigma_px: float
    background: str  # "gradient" | "flat"
    brightness: float
    noise_std: float
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"domain {self.name!r}: count_range must satisfy 0 <= min <= max, got {self.count_range}")
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ValueError(f"domain {self.name!r}: image_size {self.image_size} must be positive multiples of 8")
        if self.noise_std < 0:
            raise ValueError(f"domain {self.name!r}: noise_std must be >= 0, got {self.noise_std}")
        if not 0 <= self.brightness <= 1:
            raise ValueError(f"domain {self.name!r}: brightness must lie in [0, 1], got {self.brightness}")
        if self.blob_sigma_px <= 0:
            raise ValueError(f"domain {self.name!r}: blob_sigma_px must be > 0, got {self.blob_sigma_px}")
        if self.background not in ("gradient", "flat"):
            raise ValueError(f"domain {self.name!r}: background must be 'gradient' or 'flat', got {self.background!r}")

    def to_dict(self) -> dict:
        return asdict(self)


SOURCE_DOMAIN = DomainSpec("source", (5, 40), 2.0, "gradient", 0.9, 0.01)
TARGET_DOMAIN = DomainSpec("target", (5, 25), 3.0, "flat", 0.4, 0.05)


@dataclass
class Sample:
    image: np.ndarray  # (1, 1, H, W) float32 in [0, 1]
    points: np.ndarray  # (count, 2) float64 (row, col)
    density: np.ndarray  # (1, 1, H, W) float32
    index: int = 0

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DatasetSplit:
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def items(self):
        return (("train", self.train), ("val", self.val), ("test", self.test))


def _kernel_offsets(sigma: float) -> int:
    return int(math.ceil(3.0 * sigma))


def density_from_points(points, sigma_gt: float = SIGMA_GT, shape: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Sum of unit-mass Gaussian kernels truncated at radius ``3 * sigma_gt``.

    Kernels are sampled at pixel centres and renormalised over the truncation
    disk, so a kernel lying fully inside the image contributes mass 1.
    """
    if sigma_gt <= 0:
        raise ValueError(f"sigma_gt must be > 0, got {sigma_gt}")
    h, w = shape
    out = np.zeros((h, w), np.float64)
    radius = 3.0 * sigma_gt
    r = _kernel_offsets(sigma_gt) + 1
    for py, px in np.asarray(points, np.float64).reshape(-1, 2):
        cy, cx = int(math.floor(py)), int(math.floor(px))
        ys = np.arange(cy - r, cy + r + 1)
        xs = np.arange(cx - r, cx + r + 1)
        dy = ys[:, None] + 0.5 - py
        dx = xs[None, :] + 0.5 - px
        d2 = dy * dy + dx * dx
        k = np.exp(-d2 / (2.0 * sigma_gt**2))
        k[d2 > radius * radius] = 0.0
        k /= k.sum()
        y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
        if y0 >= y1 or x0 >= x1:
            continue
        out[y0:y1, x0:x1] += k[y0 - (cy - r) : y1 - (cy - r), x0 - (cx - r) : x1 - (cx - r)]
    return out.astype(np.float32).reshape(1, 1, h, w)


def _background(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    if spec.background == "flat":
        return np.full((h, w), 0.35)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    proj = (yy / max(h - 1, 1) - 0.5) * math.sin(angle) + (xx / max(w - 1, 1) - 0.5) * math.cos(angle)
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    return 0.15 + 0.4 * proj


def generate_scene(spec: DomainSpec, seed: int, index: int = 0) -> Sample:
    rng = np.random.default_rng(seed)
    h, w = spec.image_size
    lo, hi = spec.count_range
    count = int(rng.integers(lo, hi + 1))
    points = np.column_stack([rng.uniform(0, h, count), rng.uniform(0, w, count)])

    bg = _background(spec, rng)
    yy, xx = np.mgrid[0:h, 0:w]
    people = np.zeros((h, w))
    s2 = 2.0 * spec.blob_sigma_px**2
    for py, px in points:
        people += BLOB_PEAK * np.exp(-((yy + 0.5 - py) ** 2 + (xx + 0.5 - px) ** 2) / s2)
    img = spec.brightness * np.clip(bg + people, 0.0, 1.0)
    img += rng.normal(0.0, spec.noise_std, size=(h, w)) if spec.noise_std else 0.0
    img = np.clip(img, 0.0, 1.0).astype(np.float32).reshape(1, 1, h, w)
    return Sample(img, points, density_from_points(points, SIGMA_GT, (h, w)), index)


def build_split(spec: DomainSpec, sizes: dict[str, int] | Sequence[int], seed: int) -> DatasetSplit:
    """Train/val/test splits; sample ``j`` overall is generated with seed ``seed + j``."""
    if not isinstance(sizes, dict):
        sizes = dict(zip(("train", "val", "test"), sizes))
    n_train, n_val, n_test = (int(sizes.get(k, 0)) for k in ("train", "val", "test"))
    if min(n_train, n_val, n_test) < 0:
        raise ValueError(f"split sizes must be >= 0, got {sizes}")
    samples = [generate_scene(spec, seed + j, j) for j in range(n_train + n_val + n_test)]
    return DatasetSplit(samples[:n_train], samples[n_train : n_train + n_val], samples[n_train + n_val :])


def scene_regularization(source: Sequence[Sample], target_range: tuple[int, int]) -> list[Sample]:
    """Keep the source samples whose people count falls inside the target's range."""
    lo, hi = target_range
    if lo > hi:
        raise ValueError(f"target range min {lo} exceeds max {hi}")
    kept = [s for s in source if lo <= s.count <= hi]
    if not kept:
        raise ValueError(
            f"no source sample has a count in [{lo}, {hi}]; widen the range to avoid "
            "negative adaptation from mismatched density ranges"
        )
    return kept


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch images and density maps into (N, 1, H, W) arrays."""
    return (
        np.concatenate([s.image for s in samples], axis=0),
        np.concatenate([s.density for s in samples], axis=0),
    )


# ----------------------------------------------------------------- file dumps


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def dump_split(samples: Sequence[Sample], directory: str | os.PathLike) -> None:
    """Write ``NNNNN.img`` / ``NNNNN.den`` (raw little-endian float32) and ``NNNNN.txt`` points."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        _write_atomic(d / f"{stem}.img", s.image.astype("<f4").tobytes())
        _write_atomic(d / f"{stem}.den", s.density.astype("<f4").tobytes())
        lines = "".join(f"{float(r)!r} {float(c)!r}\n" for r, c in s.points)
        _write_atomic(d / f"{stem}.txt", lines.encode())


def load_split(directory: str | os.PathLike, image_size: tuple[int, int]) -> list[Sample]:
    d = Path(directory)
    h, w = image_size
    out = []
    for i, img_path in enumerate(sorted(d.glob("*.img"))):
        stem = img_path.stem
        img = np.frombuffer(img_path.read_bytes(), "<f4")
        den = np.frombuffer((d / f"{stem}.den").read_bytes(), "<f4")
        if img.size != h * w or den.size != h * w:
            raise ValueError(f"{img_path}: expected {h * w} floats, found image {img.size}, density {den.size}")
        text = (d / f"{stem}.txt").read_text().split()
        pts = np.array([float(t) for t in text], np.float64).reshape(-1, 2)
        out.append(
            Sample(
                img.astype(np.float32).reshape(1, 1, h, w),
                pts,
                den.astype(np.float32).reshape(1, 1, h, w),
                i,
            )
        )
    return out
