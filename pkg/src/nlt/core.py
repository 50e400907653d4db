"""Neuron-level linear transformation of convolution weights.

A *neuron* is one output channel of a convolution: a ``c x kh x kw`` group
of weights. Each neuron gets a factor and a bias per input channel, and the
target weights are ``factor[c] * source[c] + bias[c]`` broadcast over the
kernel's spatial extent. Source weights stay frozen; only the shift
parameters are learned.

Shift parameters live in plain float32 arrays (one ``(out, in)`` matrix per
layer for factors and one for biases) rather than in autodiff tensors, and
their gradients are routed by hand from the gradient of the target weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .counter import CounterNet, LayerSpec

__all__ = [
    "NeuronShift",
    "LayerShift",
    "ShiftBank",
    "ShiftParamCount",
    "init_shift_bank",
    "apply_nlt",
    "backprop_through_nlt",
    "reg_loss",
    "reg_grad",
    "count_shift_params",
]


class NeuronShift(NamedTuple):
    factor: np.ndarray
    bias: np.ndarray


@dataclass
class LayerShift:
    name: str
    factor: np.ndarray  # (out_channels, in_channels)
    bias: np.ndarray  # (out_channels, in_channels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.factor.shape

    def neuron(self, i: int) -> NeuronShift:
        return NeuronShift(self.factor[i], self.bias[i])


@dataclass
class ShiftBank:
    layers: list[LayerShift]

    @property
    def k(self) -> int:
        """Total number of neurons."""
        return sum(layer.shape[0] for layer in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, name: str) -> LayerShift:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def neurons(self) -> Iterable[tuple[str, int, NeuronShift]]:
        for layer in self.layers:
            for i in range(layer.shape[0]):
                yield layer.name, i, layer.neuron(i)

    def arrays(self) -> list[np.ndarray]:
        """Factors and biases interleaved per layer; the order used by optimizers and checkpoints."""
        out = []
        for layer in self.layers:
            out += [layer.factor, layer.bias]
        return out

    def copy(self) -> "ShiftBank":
        return ShiftBank([LayerShift(l.name, l.factor.copy(), l.bias.copy()) for l in self.layers])

    def flat(self) -> np.ndarray:
        """Concatenated ``(factor - 1, bias)`` vector, in float64."""
        parts = []
        for layer in self.layers:
            parts.append(layer.factor.astype(np.float64).ravel() - 1.0)
            parts.append(layer.bias.astype(np.float64).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def structure(self) -> list[tuple[str, tuple[int, int]]]:
        return [(l.name, l.shape) for l in self.layers]


def init_shift_bank(net: CounterNet) -> ShiftBank:
    """One neuron shift per output channel of every conv layer; factors 1, biases 0."""
    specs = net.conv_specs
    if not specs:
        raise ValueError("network has no convolution layers to shift")
    layers = [
        LayerShift(
            name,
            np.ones((s.out_channels, s.in_channels), np.float32),
            np.zeros((s.out_channels, s.in_channels), np.float32),
        )
        for name, s in zip(net.conv_names, specs)
    ]
    return ShiftBank(layers)


def _check_layer(layer: LayerShift, weight_shape: tuple[int, ...]) -> None:
    o, c = weight_shape[:2]
    if layer.shape != (o, c):
        raise ValueError(
            f"shift bank layer {layer.name} has shape {layer.shape} (neurons x input channels) "
            f"but source weight is {tuple(weight_shape)}; first mismatching neuron index "
            f"{min(o, layer.shape[0]) if layer.shape[0] != o else 0}"
        )


def apply_nlt(source_params: Mapping[str, np.ndarray], bank: ShiftBank) -> dict[str, np.ndarray]:
    """Target parameters from frozen source parameters and a shift bank.

    Conv biases are copied unchanged. ``source_params`` is never modified.
    """
    target = {k: v.copy() for k, v in source_params.items()}
    for layer in bank:
        key = f"{layer.name}.weight"
        if key not in source_params:
            raise ValueError(f"shift bank layer {layer.name} has no matching source weight {key}")
        w = source_params[key]
        _check_layer(layer, w.shape)
        target[key] = (layer.factor[:, :, None, None] * w + layer.bias[:, :, None, None]).astype(w.dtype)
    n_weights = sum(k.endswith(".weight") for k in source_params)
    if n_weights != len(bank):
        raise ValueError(f"shift bank has {len(bank)} layers but source has {n_weights} conv weights")
    return target


def backprop_through_nlt(
    grad_target_weights: Mapping[str, np.ndarray], source_params: Mapping[str, np.ndarray], bank: ShiftBank
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(d factor, d bias)`` given gradients w.r.t. the target weights.

    ``d factor[i, c] = sum_hw G[i, c] * W_src[i, c]`` and
    ``d bias[i, c] = sum_hw G[i, c]``.
    """
    out = []
    for layer in bank:
        key = f"{layer.name}.weight"
        g = grad_target_weights[key]
        w = source_params[key]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {key} has shape {g.shape}, source weight has {w.shape}")
        _check_layer(layer, w.shape)
        g64 = g.astype(np.float64)
        dfactor = (g64 * w.astype(np.float64)).sum(axis=(2, 3))
        dbias = g64.sum(axis=(2, 3))
        out.append((dfactor.astype(layer.factor.dtype), dbias.astype(layer.bias.dtype)))
    return out


def reg_loss(bank: ShiftBank, lam: float) -> float:
    """``lam * sum((factor - 1)**2 + bias**2)`` over every scalar in the bank."""
    if lam < 0:
        raise ValueError(f"regularization weight must be >= 0, got {lam}")
    if lam == 0:
        return 0.0
    total = 0.0
    for layer in bank:
        f = layer.factor.astype(np.float64) - 1.0
        b = layer.bias.astype(np.float64)
        total += float((f * f).sum() + (b * b).sum())
    return lam * total


def reg_grad(bank: ShiftBank, lam: float) -> list[tuple[np.ndarray, np.ndarray]]:
    if lam < 0:
        raise ValueError(f"regularization weight must be >= 0, got {lam}")
    return [
        (
            (2.0 * lam * (layer.factor.astype(np.float64) - 1.0)).astype(layer.factor.dtype),
            (2.0 * lam * layer.bias.astype(np.float64)).astype(layer.bias.dtype),
        )
        for layer in bank
    ]


class ShiftParamCount(NamedTuple):
    neurons: int
    shift_scalars: int
    source_weight_scalars: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.shift_scalars, self.source_weight_scalars)


def count_shift_params(net: CounterNet | Iterable[LayerSpec]) -> ShiftParamCount:
    """Neuron and scalar counts for a net or any list of layer specs (e.g. ``net.encoder``)."""
    specs = net.conv_specs if isinstance(net, CounterNet) else [s for s in net if s.is_conv]
    neurons = sum(s.out_channels for s in specs)
    shift = sum(2 * s.in_channels * s.out_channels for s in specs)
    weights = sum(s.in_channels * s.out_channels * s.kernel_size**2 for s in specs)
    return ShiftParamCount(neurons, shift, weights)
