"""scikit-learn style wrapper around one training regime.

``X`` is a stack of grayscale images, ``(n, H, W)`` or ``(n, 1, H, W)``;
``y`` is the matching stack of density maps. ``fit`` takes the few-shot
target data as ``X, y`` and the labelled source data as keyword arguments.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .counter import build_counter, forward
from .data import Sample
from .training import Regime, TrainConfig, run_regime

__all__ = ["NLTCounter"]


def _as_images(X, name: str) -> np.ndarray:
    arr = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_features=1)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"{name} must have shape (n, H, W) or (n, 1, H, W), got {arr.shape}")
    if arr.shape[2] % 8 or arr.shape[3] % 8:
        raise ValueError(f"{name} spatial size {arr.shape[2:]} must be divisible by 8; pad the images")
    return arr


def _samples(X, y, name: str) -> list[Sample]:
    images = _as_images(X, name)
    dens = _as_images(y, f"{name} density")
    if dens.shape != images.shape:
        raise ValueError(f"{name} images {images.shape} and density maps {dens.shape} differ in shape")
    return [Sample(images[i : i + 1], np.zeros((0, 2)), dens[i : i + 1], i) for i in range(len(images))]


class NLTCounter(BaseEstimator):
    """Crowd counter adapted to a target domain from few-shot examples.

    Parameters mirror :class:`nlt.training.TrainConfig` plus the network
    configuration and the regime (``"nlt"`` by default).
    """

    def __init__(self, net="desk_small", regime="nlt", alpha=1e-4, beta=1e-4, lam=1e-4, source_batch=8,
                 target_batch=4, iterations=3000, val_interval=50, output_scale=0.01, random_state=0):
        self.net = net
        self.regime = regime
        self.alpha = alpha
        self.beta = beta
        self.lam = lam
        self.source_batch = source_batch
        self.target_batch = target_batch
        self.iterations = iterations
        self.val_interval = val_interval
        self.output_scale = output_scale
        self.random_state = random_state

    def fit(self, X, y, *, source_X=None, source_y=None, val_X=None, val_y=None):
        """Train on source data and adapt with the few-shot ``X, y``.

        Without ``val_X`` the few-shot set doubles as the validation set used
        for best-checkpoint selection.
        """
        regime = Regime(self.regime)
        fewshot = _samples(X, y, "X")
        source = _samples(source_X, source_y, "source_X") if source_X is not None else []
        if not source and regime is not Regime.SUPERVISED:
            raise ValueError(f"regime {regime.value} needs labelled source data (source_X, source_y)")
        val = _samples(val_X, val_y, "val_X") if val_X is not None else fewshot
        config = TrainConfig(self.alpha, self.beta, self.lam, self.source_batch, self.target_batch,
                             self.iterations, self.val_interval, int(self.random_state))
        self.net_ = build_counter(self.net, seed=int(self.random_state), in_channels=1, output_scale=self.output_scale)
        self.checkpoint_ = run_regime(regime, self.net_, source, fewshot, val, config)
        self.params_ = self.checkpoint_.target_params()
        self.n_features_in_ = int(np.prod(fewshot[0].image.shape[1:]))
        return self

    def predict(self, X) -> np.ndarray:
        """Density maps, shape ``(n, H, W)``."""
        check_is_fitted(self, "params_")
        return forward(self.net_, self.params_, _as_images(X, "X")).data[:, 0]

    def count(self, X) -> np.ndarray:
        return self.predict(X).astype(np.float64).sum(axis=(1, 2))

    def score(self, X, y) -> float:
        """Negative mean absolute counting error (higher is better)."""
        truth = _as_images(y, "y").astype(np.float64).sum(axis=(1, 2, 3))
        return -float(np.mean(np.abs(self.count(X) - truth)))
