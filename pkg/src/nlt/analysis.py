"""Parameter-level statistics of a learned domain shift."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import ShiftBank

__all__ = [
    "LayerShiftStats",
    "ShiftCategory",
    "Histogram",
    "kernel_means",
    "kernel_mean_histogram",
    "layer_shift_means",
    "classify_shift",
    "shift_stability_report",
    "stats_to_text",
    "histogram_to_text",
    "plot_layer_means",
]


@dataclass(frozen=True)
class LayerShiftStats:
    layer_index: int
    mean_factor_minus_one: float
    mean_bias: float
    n_scalars: int  # per component

    def to_text(self) -> str:
        return (
            f"{self.layer_index},{self.mean_factor_minus_one!r},{self.mean_bias!r},{self.n_scalars}"
        )


class ShiftCategory(str, enum.Enum):
    DOWN = "down"
    UP = "up"
    UP_DOWN = "up_down"


class Histogram(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray
    means: np.ndarray


def kernel_means(weight: np.ndarray) -> np.ndarray:
    """Mean of each neuron's ``c x kh x kw`` kernel group."""
    w = np.asarray(weight, np.float64)
    return w.reshape(w.shape[0], -1).mean(axis=1)


def kernel_mean_histogram(weight: np.ndarray, bins: int = 20, range: tuple[float, float] = (-0.1, 0.1)) -> Histogram:
    """Histogram of per-neuron kernel means; values outside ``range`` land in the edge bins."""
    lo, hi = range
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if not lo < hi:
        raise ValueError(f"histogram range must satisfy lo < hi, got {range}")
    means = kernel_means(weight)
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, means, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return Histogram(edges, counts, means)


def layer_shift_means(bank: ShiftBank) -> list[LayerShiftStats]:
    out = []
    for i, layer in enumerate(bank):
        f = layer.factor.astype(np.float64)
        b = layer.bias.astype(np.float64)
        out.append(LayerShiftStats(i, float(f.mean() - 1.0), float(b.mean()), int(f.size)))
    return out


def classify_shift(stats: Sequence[LayerShiftStats], threshold_ratio: float = 0.7) -> ShiftCategory:
    """``down`` / ``up`` when at least ``threshold_ratio`` of layers have both means negative / positive.

    Anything else, including a bank sitting exactly at its initialization,
    is ``up_down``.
    """
    if not stats:
        raise ValueError("no layer statistics to classify")
    if not 0.5 < threshold_ratio <= 1.0:
        raise ValueError(f"threshold_ratio must lie in (0.5, 1], got {threshold_ratio}")
    n = len(stats)
    down = sum(s.mean_factor_minus_one < 0 and s.mean_bias < 0 for s in stats)
    up = sum(s.mean_factor_minus_one > 0 and s.mean_bias > 0 for s in stats)
    if down >= threshold_ratio * n:
        return ShiftCategory.DOWN
    if up >= threshold_ratio * n:
        return ShiftCategory.UP
    return ShiftCategory.UP_DOWN


def shift_stability_report(banks: Sequence[ShiftBank]) -> np.ndarray:
    """Pairwise cosine similarity of the banks' ``(factor - 1, bias)`` vectors."""
    if not banks:
        raise ValueError("no banks given")
    ref = banks[0].structure()
    for j, b in enumerate(banks[1:], start=1):
        if b.structure() != ref:
            raise ValueError(f"bank {j} has structure {b.structure()}, expected {ref}")
    vecs = [b.flat() for b in banks]
    norms = [float(np.linalg.norm(v)) for v in vecs]
    n = len(banks)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0 or norms[j] == 0:
                s = 1.0 if norms[i] == norms[j] else 0.0
            else:
                s = float(vecs[i] @ vecs[j]) / (norms[i] * norms[j])
            sim[i, j] = sim[j, i] = s
    return sim


def stats_to_text(stats: Sequence[LayerShiftStats], category: ShiftCategory | None = None) -> str:
    lines = ["layer,mean_factor_minus_one,mean_bias,n_scalars"]
    lines += [s.to_text() for s in stats]
    if category is not None:
        lines.append(f"category={category.value}")
    return "\n".join(lines) + "\n"


def histogram_to_text(hist: Histogram) -> str:
    lines = ["bin_lo,bin_hi,count"]
    for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
        lines.append(f"{float(lo)!r},{float(hi)!r},{int(c)}")
    return "\n".join(lines) + "\n"


def plot_layer_means(stats: Sequence[LayerShiftStats], path) -> None:
    """Bar chart of per-layer ``mean(factor) - 1`` and ``mean(bias)`` saved as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    idx = np.arange(len(stats))
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(idx - 0.2, [s.mean_factor_minus_one for s in stats], 0.4, label="factor - 1")
    ax.bar(idx + 0.2, [s.mean_bias for s in stats], 0.4, label="bias")
    ax.axhline(0, color="k", lw=0.5)
    ax.set_xlabel("conv layer")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
