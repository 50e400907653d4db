"""Counting error and density-map quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = ["MetricsReport", "mae_mse", "psnr", "ssim", "evaluate", "gaussian_window", "PSNR_CAP"]

PSNR_CAP = 100.0


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    psnr: float
    ssim: float
    n_images: int

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.__dict__.items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(float(kv["mae"]), float(kv["mse"]), float(kv["psnr"]), float(kv["ssim"]), int(kv["n_images"]))


def mae_mse(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> tuple[float, float]:
    """Mean absolute count error and the *root* mean squared count error."""
    p = np.asarray(pred_counts, np.float64).ravel()
    g = np.asarray(gt_counts, np.float64).ravel()
    if p.size != g.size:
        raise ValueError(f"got {p.size} predictions for {g.size} ground-truth counts")
    if p.size == 0:
        raise ValueError("cannot compute counting error over zero images")
    err = np.abs(g - p)
    return float(err.mean()), float(math.sqrt((err * err).mean()))


def _normalize_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, np.float64)
    g = np.asarray(gt, np.float64)
    if p.ndim > 2:
        p = p.reshape(p.shape[-2:]) if p.size == math.prod(p.shape[-2:]) else p
    if g.ndim > 2:
        g = g.reshape(g.shape[-2:]) if g.size == math.prod(g.shape[-2:]) else g
    if p.shape != g.shape or p.ndim != 2:
        raise ValueError(f"density maps differ in shape or are not single maps: {p.shape} vs {g.shape}")
    peak = g.max()
    if not peak > 0:
        raise ValueError("ground-truth density map is all zero; PSNR/SSIM data range undefined")
    return p / peak, g / peak


def psnr(pred, gt) -> float:
    """PSNR in dB after scaling both maps by ``1 / max(gt)``; identical maps give ``PSNR_CAP``."""
    p, g = _normalize_pair(pred, gt)
    mse = float(((p - g) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    views = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", views, win)


def ssim(pred, gt, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all full 11x11 Gaussian-weighted windows, data range 1 after gt-max scaling."""
    p, g = _normalize_pair(pred, gt)
    if min(p.shape) < win_size:
        raise ValueError(f"image {p.shape} is smaller than the {win_size}x{win_size} SSIM window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_p, mu_g = _filter_valid(p, win), _filter_valid(g, win)
    s_pp = _filter_valid(p * p, win) - mu_p * mu_p
    s_gg = _filter_valid(g * g, win) - mu_g * mu_g
    s_pg = _filter_valid(p * g, win) - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * s_pg + c2)
    den = (mu_p**2 + mu_g**2 + c1) * (s_pp + s_gg + c2)
    return float(np.clip((num / den).mean(), -1.0, 1.0))


def evaluate(net, params: Mapping[str, np.ndarray], samples, batch_size: int = 16) -> MetricsReport:
    """Counting error and mean PSNR/SSIM of ``params`` over ``samples``."""
    from .counter import forward

    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    preds = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.concatenate([s.image for s in chunk], axis=0)
        preds.extend(forward(net, params, images).data)
    return report_from_maps(preds, [s.density for s in samples])


def report_from_maps(pred_maps, gt_maps) -> MetricsReport:
    pred_maps, gt_maps = list(pred_maps), list(gt_maps)
    if len(pred_maps) != len(gt_maps):
        raise ValueError(f"got {len(pred_maps)} predicted maps for {len(gt_maps)} ground-truth maps")
    if not pred_maps:
        raise ValueError("cannot evaluate on an empty split")
    pc = [float(np.asarray(m, np.float64).sum()) for m in pred_maps]
    gc = [float(np.asarray(m, np.float64).sum()) for m in gt_maps]
    mae, mse = mae_mse(pc, gc)
    psnrs = [psnr(p, g) for p, g in zip(pred_maps, gt_maps)]
    ssims = [ssim(p, g) for p, g in zip(pred_maps, gt_maps)]
    return MetricsReport(mae, mse, float(np.mean(psnrs)), float(np.mean(ssims)), len(pred_maps))
