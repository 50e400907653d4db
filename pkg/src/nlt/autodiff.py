"""Small deterministic tensor engine with reverse-mode differentiation.

Only the operators the density counter needs are provided: 2-D convolution,
relu, 2x2 max-pooling, nearest upsampling, elementwise add/scale, summation and
the halved mean-squared loss. Storage is float32 by default; reductions and
convolution contractions accumulate in float64. Tensors created from float64
arrays stay float64, which the finite-difference checks rely on.

Operations are recorded on the active :class:`GradientTape` (if any) whenever
one of their inputs requires a gradient::

    w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    with GradientTape() as tape:
        loss = mse_loss(conv2d(x, w, b, padding=1), y, n=1)
    backward(tape, loss)
    w.grad
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "AdamState",
    "conv2d",
    "relu",
    "maxpool2",
    "upsample_nearest",
    "add",
    "scale",
    "tensor_sum",
    "mse_loss",
    "backward",
    "adam_step",
]

_ACC = np.float64


def _storage_dtype(arr: np.ndarray) -> np.dtype:
    return np.dtype(np.float64) if arr.dtype == np.float64 else np.dtype(np.float32)


class Tensor:
    """n-dimensional float array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps d(loss)/d(output) to one gradient per input (None where not needed)
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradientTape:
    """Ordered record of executed operations.

    Use as a context manager; tapes nest, and an operation is recorded on the
    innermost active tape only.
    """

    _active: list["GradientTape"] = []

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        GradientTape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        GradientTape._active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def current(cls) -> "GradientTape | None":
        return cls._active[-1] if cls._active else None


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = GradientTape.current()
    if needs and tape is not None:
        tape.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


# --------------------------------------------------------------------------- ops


def _im2col(x_cnhw: np.ndarray, kh: int, kw: int, stride: int, padding: int, dtype) -> tuple[np.ndarray, int, int]:
    """Column matrix of shape (C*kh*kw, N*H'*W') from a (C, N, H, W) array."""
    c, n, h, w = x_cnhw.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x_cnhw
    else:
        xp = x_cnhw
    cols = np.empty((c, kh, kw, n, ho, wo), dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def conv2d(input: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``input`` with ``weight`` plus a per-output-channel bias."""
    _check_4d(input, "conv2d input")
    _check_4d(weight, "conv2d weight")
    n, c, h, w = input.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(
            f"conv2d channel mismatch: input has C={c} channels but weight expects C={wc} "
            f"(input shape {input.shape}, weight shape {weight.shape})"
        )
    if bias.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},) to match weight O={o}, got {bias.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    dtype = _storage_dtype(input.data)
    cols, ho, wo = _im2col(input.data.transpose(1, 0, 2, 3), kh, kw, stride, padding, dtype)
    wmat = weight.data.astype(dtype).reshape(o, c * kh * kw)
    out = wmat @ cols
    out += bias.data.astype(dtype)[:, None]
    # output stays (O, N, H', W') in memory; exposed as an NCHW view
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward_fn(g: np.ndarray):
        g_cnhw = g.astype(dtype, copy=False).transpose(1, 0, 2, 3)
        g2 = np.ascontiguousarray(g_cnhw).reshape(o, n * ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(o, c, kh, kw)
        if bias.requires_grad:
            gb = g2.sum(axis=1, dtype=_ACC)
        if input.requires_grad:
            if stride == 1 and kh - 1 - padding >= 0 and kw - 1 - padding >= 0 and kh == kw:
                # stride-1 input gradient is a correlation with the flipped, transposed kernel
                gcols, _, _ = _im2col(g_cnhw, kh, kw, 1, kh - 1 - padding, dtype)
                wflip = weight.data.astype(dtype)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * kh * kw)
                gx = (wflip @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _record("conv2d", (input, weight, bias), out.astype(dtype, copy=False), backward_fn)


def relu(input: Tensor) -> Tensor:
    mask = input.data > 0
    out = np.where(mask, input.data, 0).astype(input.dtype)

    def backward_fn(g):
        return (g * mask,)

    return _record("relu", (input,), out, backward_fn)


def maxpool2(input: Tensor) -> Tensor:
    """2x2 max-pooling with stride 2. Ties route the gradient to the first maximum."""
    _check_4d(input, "maxpool2 input")
    n, c, h, w = input.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = input.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _record("maxpool2", (input,), out, backward_fn)


def upsample_nearest(input: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    _check_4d(input, "upsample input")
    n, c, h, w = input.shape
    out = np.repeat(np.repeat(input.data, factor, axis=2), factor, axis=3)

    def backward_fn(g):
        gs = g.astype(_ACC).reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        return (gs,)

    return _record("upsample_nearest", (input,), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    return _record("scale", (a,), (a.data * k).astype(a.dtype), lambda g: (g * k,))


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.astype(_ACC).sum(), dtype=a.dtype)
    return _record("sum", (a,), out, lambda g: (np.broadcast_to(g, a.shape),))


def mse_loss(pred: Tensor, target: Tensor, n: int) -> Tensor:
    """``1/(2n) * sum((pred - target)**2)`` as a scalar tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    if n < 1:
        raise ValueError(f"mse_loss batch size n must be >= 1, got {n}")
    if pred.data.ndim and pred.shape[0] != n:
        raise ValueError(f"mse_loss n={n} does not match leading dimension {pred.shape[0]}")
    diff = pred.data.astype(_ACC) - target.data.astype(_ACC)
    out = np.asarray((diff * diff).sum() / (2.0 * n), dtype=pred.dtype)

    def backward_fn(g):
        gd = diff * (float(g) / n)
        return gd, -gd

    return _record("mse_loss", (pred, target), out, backward_fn)


# ---------------------------------------------------------------------- backward


def backward(tape: GradientTape, loss: Tensor, sources: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Leaves are the tensors recorded as inputs on ``tape`` that no recorded
    operation produced, plus any extra ``sources``. Leaves that do not lie on
    a path to ``loss`` receive an all-zero gradient. Existing ``.grad`` values
    on leaves are overwritten.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=_ACC)}
    leaves: dict[int, Tensor] = {}
    for t in sources:
        leaves[id(t)] = t

    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=_ACC)

    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros(t.shape, t.dtype) if g is None else g.astype(t.dtype).reshape(t.shape)


# -------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kw) -> "AdamState":
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        return cls(
            lr=lr,
            first_moment=[np.zeros(p.shape, _ACC) for p in params],
            second_moment=[np.zeros(p.shape, _ACC) for p in params],
            **kw,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError(
            f"adam_step got {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moment)} moment buffers"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ValueError(
                f"adam_step shape mismatch at index {i}: param {p.shape}, grad {g.shape}, "
                f"moment {state.first_moment[i].shape}"
            )

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1**t)
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g64 = g.astype(_ACC)
        m *= b1
        m += (1.0 - b1) * g64
        v *= b2
        v += (1.0 - b2) * (g64 * g64)
        update = step_size * m / (np.sqrt(v / bc2) + state.eps)
        p[...] = (p.astype(_ACC) - update).astype(p.dtype)
