"""Encoder-decoder density counter.

The encoder is a stack of "same"-padded 3x3 convolutions with three 2x2
max-pooling stages (1/8 resolution). The decoder first halves the channel
count with a 3x3 convolution (VGG-16 plan only), then alternates
nearest upsampling with channel-halving 3x3 convolutions three times and
ends with a 1x1 convolution to a single density channel. A final relu keeps
the density nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, conv2d, maxpool2, relu, scale, upsample_nearest

__all__ = [
    "LayerSpec",
    "CounterNet",
    "build_counter",
    "forward",
    "count_from_density",
    "PAPER_VGG16_ENCODER_CHANNELS",
]

CONV_KINDS = ("conv3x3", "conv1x1")
LAYER_KINDS = CONV_KINDS + ("maxpool2", "upsample2")

PAPER_VGG16_ENCODER_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512)

# fixed multiplier on the last activation: the network regresses 100x the
# density, which keeps the final relu alive at initialization
DEFAULT_OUTPUT_SCALE = 0.01


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    activation: str = "relu"

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS

    @property
    def kernel_size(self) -> int:
        return {"conv3x3": 3, "conv1x1": 1}.get(self.kind, 0)

    def to_text(self) -> str:
        return f"{self.kind}:{self.in_channels}:{self.out_channels}:{self.activation}"

    @classmethod
    def from_text(cls, text: str) -> "LayerSpec":
        kind, cin, cout, act = text.strip().split(":")
        return cls(kind, int(cin), int(cout), act)


def _validate_specs(encoder: Sequence[LayerSpec], decoder: Sequence[LayerSpec]) -> None:
    layers = list(encoder) + list(decoder)
    if not layers:
        raise ValueError("counter has no layers")
    for pos, spec in enumerate(layers):
        if spec.kind not in LAYER_KINDS:
            raise ValueError(f"layer {pos}: unknown kind {spec.kind!r}, expected one of {LAYER_KINDS}")
        if spec.activation not in ("relu", "none"):
            raise ValueError(f"layer {pos}: unknown activation {spec.activation!r}")
        if spec.in_channels < 1 or spec.out_channels < 1:
            raise ValueError(f"layer {pos}: channel counts must be positive, got {spec.in_channels}->{spec.out_channels}")
        if not spec.is_conv and spec.in_channels != spec.out_channels:
            raise ValueError(
                f"layer {pos}: {spec.kind} cannot change channels ({spec.in_channels}->{spec.out_channels})"
            )
        if pos and layers[pos - 1].out_channels != spec.in_channels:
            raise ValueError(
                f"layer {pos}: in_channels={spec.in_channels} does not match previous layer's "
                f"out_channels={layers[pos - 1].out_channels}"
            )
    pools = sum(s.kind == "maxpool2" for s in encoder) - sum(s.kind == "maxpool2" for s in decoder)
    ups = sum(s.kind == "upsample2" for s in decoder) - sum(s.kind == "upsample2" for s in encoder)
    if pools != 3 or any(s.kind == "upsample2" for s in encoder):
        raise ValueError(f"encoder must downsample by exactly 8 (three maxpool2 stages), found {pools}")
    if ups != 3 or any(s.kind == "maxpool2" for s in decoder):
        raise ValueError(f"decoder must upsample by exactly 8 (three upsample2 stages), found {ups}")
    last = layers[-1]
    if last.kind != "conv1x1" or last.out_channels != 1:
        raise ValueError(f"final layer must be conv1x1 with out_channels=1, got {last.to_text()}")


@dataclass
class CounterNet:
    """Layer plan plus the (source) parameters, keyed ``conv{i}.weight`` / ``conv{i}.bias``."""

    encoder: list[LayerSpec]
    decoder: list[LayerSpec]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = "custom"
    output_scale: float = DEFAULT_OUTPUT_SCALE

    @property
    def layers(self) -> list[LayerSpec]:
        return self.encoder + self.decoder

    @property
    def conv_specs(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.is_conv]

    @property
    def conv_names(self) -> list[str]:
        return [f"conv{i}" for i in range(len(self.conv_specs))]

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for name, spec in zip(self.conv_names, self.conv_specs):
            k = spec.kernel_size
            shapes[f"{name}.weight"] = (spec.out_channels, spec.in_channels, k, k)
            shapes[f"{name}.bias"] = (spec.out_channels,)
        return shapes

    def architecture(self) -> str:
        """Canonical one-line description, used to match checkpoints to nets."""
        enc = ",".join(s.to_text() for s in self.encoder)
        dec = ",".join(s.to_text() for s in self.decoder)
        return f"{enc}|{dec}|{self.output_scale!r}"

    @classmethod
    def from_architecture(cls, text: str) -> "CounterNet":
        enc, dec, out_scale = text.split("|")
        encoder = [LayerSpec.from_text(t) for t in enc.split(",") if t]
        decoder = [LayerSpec.from_text(t) for t in dec.split(",") if t]
        _validate_specs(encoder, decoder)
        return cls(encoder, decoder, output_scale=float(out_scale))

    def decoder_conv_names(self) -> list[str]:
        n_enc = sum(s.is_conv for s in self.encoder)
        return self.conv_names[n_enc:]

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def _conv(cin: int, cout: int, kind: str = "conv3x3", act: str = "relu") -> LayerSpec:
    return LayerSpec(kind, cin, cout, act)


def _encoder(channels: Sequence[int], pool_after: Sequence[int], in_channels: int) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    cin = in_channels
    for pos, cout in enumerate(channels, start=1):
        layers.append(_conv(cin, cout))
        cin = cout
        if pos in pool_after:
            layers.append(LayerSpec("maxpool2", cin, cin, "none"))
    return layers


def _decoder(cin: int, halve_first: bool) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    if halve_first:
        layers.append(_conv(cin, cin // 2))
        cin //= 2
    for _ in range(3):
        layers.append(LayerSpec("upsample2", cin, cin, "none"))
        layers.append(_conv(cin, cin // 2))
        cin //= 2
    layers.append(_conv(cin, 1, "conv1x1", "none"))
    return layers


def init_params(net: CounterNet, seed: int) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights (std sqrt(2/fan_in)), zero biases.

    The output layer takes the absolute value of its draw: with few input
    channels a mostly-negative draw would leave the final relu dead for good.
    """
    rng = np.random.default_rng(seed)
    params = {}
    last = f"{net.conv_names[-1]}.weight"
    for name, shape in net.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            params[name] = (np.abs(w) if name == last else w).astype(np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    return params


def build_counter(
    config: str | tuple[Sequence[LayerSpec], Sequence[LayerSpec]] = "desk_small",
    seed: int = 0,
    in_channels: int = 1,
    output_scale: float = DEFAULT_OUTPUT_SCALE,
) -> CounterNet:
    """Build a counter from a named plan or an explicit ``(encoder, decoder)`` pair.

    ``paper_vgg16`` is the VGG-16 front end (ten 3x3 convolutions, pooling
    after the 2nd, 4th and 7th) with a 512->256->128->64->32->1 decoder;
    ``desk_small`` is a narrow stand-in with encoder widths 8,8,16,16,32,32
    and decoder 32->16->8->4->1.
    """
    if isinstance(config, str):
        if config == "paper_vgg16":
            encoder = _encoder(PAPER_VGG16_ENCODER_CHANNELS, (2, 4, 7), in_channels)
            decoder = _decoder(512, halve_first=True)
        elif config == "desk_small":
            encoder = _encoder((8, 8, 16, 16, 32, 32), (2, 4, 6), in_channels)
            decoder = _decoder(32, halve_first=False)
        else:
            raise ValueError(f"unknown counter config {config!r}; expected 'paper_vgg16' or 'desk_small'")
        name = config
    else:
        encoder, decoder = list(config[0]), list(config[1])
        name = "custom"
    _validate_specs(encoder, decoder)
    net = CounterNet(encoder, decoder, name=name, output_scale=output_scale)
    net.params = init_params(net, seed)
    return net


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward(net: CounterNet, params: Mapping[str, Tensor | np.ndarray], images) -> Tensor:
    """Predict density maps of shape (N, 1, H, W) for images of shape (N, C, H, W)."""
    x = _as_tensor(images)
    if x.data.ndim != 4:
        raise ValueError(f"images must be 4-D (N, C, H, W), got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % 8 or w % 8:
        raise ValueError(f"image size {h}x{w} is not divisible by 8; pad the images to a multiple of 8")
    if x.shape[1] != net.in_channels:
        raise ValueError(f"images have {x.shape[1]} channels, net expects {net.in_channels}")
    expected = net.param_shapes()
    for key, shape in expected.items():
        if key not in params:
            raise ValueError(f"missing parameter {key}")
        if tuple(params[key].shape) != shape:
            raise ValueError(f"parameter {key} has shape {tuple(params[key].shape)}, expected {shape}")

    conv_idx = 0
    for spec in net.layers:
        if spec.is_conv:
            name = f"conv{conv_idx}"
            conv_idx += 1
            pad = spec.kernel_size // 2
            x = conv2d(x, _as_tensor(params[f"{name}.weight"]), _as_tensor(params[f"{name}.bias"]), 1, pad)
            if spec.activation == "relu":
                x = relu(x)
        elif spec.kind == "maxpool2":
            x = maxpool2(x)
        else:
            x = upsample_nearest(x, 2)
    x = relu(x)
    return scale(x, net.output_scale) if net.output_scale != 1.0 else x


def count_from_density(density) -> float:
    data = density.data if isinstance(density, Tensor) else np.asarray(density)
    return float(data.astype(np.float64).sum())
