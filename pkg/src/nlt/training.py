"""Source training, shift-parameter adaptation and the regime harness.

One joint iteration takes a source step on a synthetic batch, then an
adaptation step on a few-shot target batch that updates only the shift bank.
The source stream is identical for every regime that uses it (no
adaptation and all NLT variants), so :func:`run_shared_stream` drives any
number of shift banks from a single source trajectory; each result is bitwise
identical to running that regime alone.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .autodiff import AdamState, GradientTape, Tensor, adam_step, backward, mse_loss
from .core import (
    LayerShift,
    ShiftBank,
    apply_nlt,
    backprop_through_nlt,
    init_shift_bank,
    reg_grad,
    reg_loss,
)
from .counter import CounterNet, forward
from .data import Sample, stack

__all__ = [
    "TrainConfig",
    "Regime",
    "Checkpoint",
    "LossTerms",
    "LogRow",
    "AccessCounter",
    "train_source_step",
    "adapt_step",
    "source_gradients",
    "shift_gradients",
    "finetune_step",
    "run_joint_loop",
    "run_shared_stream",
    "run_regime",
    "select_few_shot",
    "trainable_names",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "val_mae",
]


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4
    beta: float = 1e-4
    lam: float = 1e-4
    source_batch: int = 8
    target_batch: int = 4
    iterations: int = 3000
    val_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("source_batch", "target_batch", "val_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Full-scale VGG-16 settings: 12 source and 4 target images, rates 1e-5."""
        return cls(**{"alpha": 1e-5, "beta": 1e-5, "lam": 1e-4, "source_batch": 12, "target_batch": 4, **kw})


class Regime(str, enum.Enum):
    NO_ADAPT = "no_adapt"
    SUPERVISED = "supervised"
    FINETUNE_ALL = "finetune_all"
    FINETUNE_DECODER = "finetune_decoder"
    NLT = "nlt"
    NLT_FACTOR_ONLY = "nlt_factor_only"
    NLT_BIAS_ONLY = "nlt_bias_only"
    IFS_NLT = "ifs_nlt"

    @property
    def uses_bank(self) -> bool:
        return self in (Regime.NLT, Regime.NLT_FACTOR_ONLY, Regime.NLT_BIAS_ONLY)

    @property
    def shift_components(self) -> tuple[str, ...]:
        return {
            Regime.NLT: ("factor", "bias"),
            Regime.NLT_FACTOR_ONLY: ("factor",),
            Regime.NLT_BIAS_ONLY: ("bias",),
        }.get(self, ())


class LossTerms(NamedTuple):
    total: float
    density: float
    reg: float


class LogRow(NamedTuple):
    iteration: int
    source_loss: float | None
    target_loss: float | None
    val_mae: float

    def to_text(self) -> str:
        fmt = lambda v: "" if v is None else repr(float(v))
        return f"{self.iteration},{fmt(self.source_loss)},{fmt(self.target_loss)},{fmt(self.val_mae)}"


class AccessCounter(list):
    """List that counts element reads; used to audit which regimes touch target labels."""

    def __init__(self, items=()):
        super().__init__(items)
        self.reads = 0

    def __getitem__(self, i):
        result = super().__getitem__(i)
        self.reads += len(result) if isinstance(i, slice) else 1
        return result

    def __iter__(self):
        for item in super().__iter__():
            self.reads += 1
            yield item


# ------------------------------------------------------------------ checkpoints

_FORMAT = "nlt-checkpoint/1"


@dataclass
class Checkpoint:
    manifest: dict[str, str]
    params: dict[str, np.ndarray]
    bank: ShiftBank | None = None

    @property
    def regime(self) -> Regime:
        return Regime(self.manifest["regime"])

    @property
    def iteration(self) -> int:
        return int(self.manifest["iteration"])

    @property
    def val_mae(self) -> float:
        return float(self.manifest["val_mae"])

    @property
    def architecture(self) -> str:
        return self.manifest["architecture"]

    def target_params(self) -> dict[str, np.ndarray]:
        """Parameters used for inference: NLT-transformed when a bank is present."""
        return apply_nlt(self.params, self.bank) if self.bank is not None else self.params

    def blobs(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{k}", v) for k, v in self.params.items()]
        if self.bank is not None:
            for layer in self.bank:
                out.append((f"factor/{layer.name}", layer.factor))
                out.append((f"bias/{layer.name}", layer.bias))
        return out


def _make_checkpoint(net: CounterNet, regime: Regime, iteration: int, mae: float, config: TrainConfig,
                     params: Mapping[str, np.ndarray], bank: ShiftBank | None, **extra) -> Checkpoint:
    manifest = {
        "format": _FORMAT,
        "architecture": net.architecture(),
        "regime": regime.value,
        "iteration": str(iteration),
        "val_mae": repr(float(mae)),
        "seed": str(config.seed),
    }
    manifest.update({k: str(v) for k, v in extra.items()})
    return Checkpoint(manifest, {k: v.copy() for k, v in params.items()}, bank.copy() if bank else None)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    lines = [f"{k}={v}" for k, v in ckpt.manifest.items() if not k.startswith("blob.")]
    payload = []
    for i, (name, arr) in enumerate(ckpt.blobs()):
        lines.append(f"blob.{i}={name}:{','.join(str(d) for d in arr.shape)}")
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return ("\n".join(lines) + "\n\n").encode() + b"".join(payload)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write a ``key=value`` manifest, a blank line, then raw little-endian float32 blobs."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, net: CounterNet | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: no manifest terminator (blank line) found")
    manifest: dict[str, str] = {}
    for line in raw[:sep].decode().splitlines():
        key, _, value = line.partition("=")
        manifest[key] = value
    if manifest.get("format") != _FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    if net is not None and manifest.get("architecture") != net.architecture():
        raise ValueError(
            f"{path}: checkpoint architecture does not match the loader's network "
            f"({manifest.get('architecture')} != {net.architecture()})"
        )

    decls = []
    i = 0
    while f"blob.{i}" in manifest:
        name, _, dims = manifest[f"blob.{i}"].rpartition(":")
        decls.append((name, tuple(int(d) for d in dims.split(",") if d)))
        i += 1
    body = raw[sep + 2 :]
    expected = sum(4 * math.prod(shape) for _, shape in decls)
    if len(body) != expected:
        raise ValueError(f"{path}: manifest declares {expected} blob bytes, found {len(body)}")

    params: dict[str, np.ndarray] = {}
    factors: dict[str, np.ndarray] = {}
    biases: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in decls:
        nbytes = 4 * math.prod(shape)
        arr = np.frombuffer(body[offset : offset + nbytes], "<f4").astype(np.float32).reshape(shape)
        offset += nbytes
        kind, _, key = name.partition("/")
        {"param": params, "factor": factors, "bias": biases}[kind][key] = arr
    bank = None
    if factors:
        bank = ShiftBank([LayerShift(k, factors[k], biases[k]) for k in factors])
    manifest = {k: v for k, v in manifest.items() if not k.startswith("blob.")}
    return Checkpoint(manifest, params, bank)


# ------------------------------------------------------------------------ steps


def source_gradients(net: CounterNet, params: Mapping[str, np.ndarray], batch: Sequence[Sample],
               keys: Iterable[str]) -> tuple[float, dict[str, np.ndarray]]:
    """Density loss ``1/(2n) sum ||pred - Y||^2`` and its gradient for ``keys``."""
    if not batch:
        raise ValueError("batch is empty")
    keys = set(keys)
    images, dens = stack(batch)
    leaves = {k: Tensor(v, requires_grad=k in keys) for k, v in params.items()}
    with GradientTape() as tape:
        loss = mse_loss(forward(net, leaves, images), Tensor(dens), len(batch))
    backward(tape, loss, [leaves[k] for k in keys])
    return loss.item(), {k: leaves[k].grad for k in keys}


def train_source_step(net: CounterNet, params: dict[str, np.ndarray], batch: Sequence[Sample],
                      opt: AdamState) -> float:
    """One Adam step on every source parameter; updates ``params`` in place and returns the loss."""
    keys = list(params)
    loss, grads = source_gradients(net, params, batch, keys)
    adam_step([params[k] for k in keys], [grads[k] for k in keys], opt)
    return loss


def finetune_step(net: CounterNet, params: dict[str, np.ndarray], batch: Sequence[Sample],
                  opt: AdamState, keys: Sequence[str]) -> float:
    """One Adam step restricted to ``keys``; the other parameters are left untouched."""
    loss, grads = source_gradients(net, params, batch, keys)
    adam_step([params[k] for k in keys], [grads[k] for k in keys], opt)
    return loss


def _bank_arrays(bank: ShiftBank, components: Sequence[str]) -> list[np.ndarray]:
    return [getattr(layer, c) for layer in bank for c in ("factor", "bias") if c in components]


def shift_gradients(net: CounterNet, source_params: Mapping[str, np.ndarray], bank: ShiftBank,
                    batch: Sequence[Sample], lam: float) -> tuple[LossTerms, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss terms and per-layer ``(d factor, d bias)`` of the few-shot objective."""
    if not batch:
        raise ValueError("few-shot batch is empty")
    target = apply_nlt(source_params, bank)
    weight_keys = [f"{layer.name}.weight" for layer in bank]
    density, gw = source_gradients(net, target, batch, weight_keys)
    reg = reg_loss(bank, lam)
    grads = [
        (df + rf, db + rb)
        for (df, db), (rf, rb) in zip(backprop_through_nlt(gw, source_params, bank), reg_grad(bank, lam))
    ]
    return LossTerms(density + reg, density, reg), grads


def adapt_step(net: CounterNet, source_params: Mapping[str, np.ndarray], bank: ShiftBank,
               batch: Sequence[Sample], lam: float, opt: AdamState,
               components: Sequence[str] = ("factor", "bias")) -> LossTerms:
    """One Adam step on the shift bank; ``source_params`` are only read.

    The loss is the few-shot density term plus ``lam`` times the squared
    distance of the bank from its identity initialization. Components not
    listed in ``components`` stay at their initial values.
    """
    terms, grads = shift_gradients(net, source_params, bank, batch, lam)
    flat = [g for df, db in grads for c, g in (("factor", df), ("bias", db)) if c in components]
    adam_step(_bank_arrays(bank, components), flat, opt)
    return terms


# --------------------------------------------------------------------- sampling


class _Cycler:
    """Endless batches over a fixed list, reshuffled at every pass."""

    def __init__(self, items: Sequence, batch: int, rng: np.random.Generator):
        if not len(items):
            raise ValueError("cannot draw batches from an empty sample list")
        self.items, self.batch, self.rng = items, batch, rng
        self.order: list[int] = []

    def next(self) -> list:
        out = []
        while len(out) < self.batch:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self.order.pop(0)])
        return out


def _source_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def _target_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def select_few_shot(train: Sequence[Sample], ratio: float, seed: int) -> list[Sample]:
    """``ceil(ratio * N)`` samples drawn without replacement, in a seed-determined order."""
    if not 0 < ratio <= 1:
        raise ValueError(f"few-shot ratio must lie in (0, 1], got {ratio}")
    n = len(train)
    k = math.ceil(round(ratio * n, 9))
    idx = np.random.default_rng([seed, 2]).permutation(n)[:k]
    return [train[i] for i in idx]


def val_mae(net: CounterNet, params: Mapping[str, np.ndarray], samples: Sequence[Sample],
            batch_size: int = 32) -> float:
    if not samples:
        raise ValueError("validation split is empty")
    errs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, dens = stack(chunk)
        pred = forward(net, params, images).data.astype(np.float64).sum(axis=(1, 2, 3))
        errs.extend(np.abs(pred - dens.astype(np.float64).sum(axis=(1, 2, 3))))
    return float(np.mean(errs))


# ---------------------------------------------------------------- run drivers


@dataclass
class _Tracker:
    """Best-on-validation snapshot bookkeeping for one regime."""

    regime: Regime
    best: Checkpoint | None = None
    rows: list[LogRow] = field(default_factory=list)
    evaluations: list[float] = field(default_factory=list)

    def offer(self, net, config, iteration, mae, params, bank=None, **extra) -> None:
        self.evaluations.append(mae)
        if self.best is None or mae < self.best.val_mae:
            self.best = _make_checkpoint(net, self.regime, iteration, mae, config, params, bank, **extra)

    def finish(self, **extra) -> Checkpoint:
        self.best.manifest.update({k: str(v) for k, v in extra.items()})
        self.best.manifest["evaluations"] = str(len(self.evaluations))
        return self.best


def _is_eval(it: int, config: TrainConfig) -> bool:
    # iteration 0 is only evaluated when it is also the last one
    return it == config.iterations or (it > 0 and it % config.val_interval == 0)


def run_shared_stream(
    net: CounterNet,
    source_train: Sequence[Sample],
    adapters: Mapping[str, tuple[Regime, Sequence[Sample]]],
    target_val: Sequence[Sample],
    config: TrainConfig,
    track_source: bool = True,
    logs: dict[str, list[LogRow]] | None = None,
) -> dict[str, Checkpoint]:
    """One source trajectory feeding several independent shift banks.

    ``adapters`` maps a label to ``(regime, few-shot samples)``; each bank has
    its own optimizer and its own target batch stream seeded identically, so
    results do not depend on which other banks share the run. With
    ``track_source`` the source-only (no adaptation) result is returned under
    ``"no_adapt"``.
    """
    params = net.copy_params()
    keys = list(params)
    src_opt = AdamState.for_params([params[k] for k in keys], config.alpha)
    src_batches = _Cycler(source_train, config.source_batch, _source_rng(config.seed))

    banks, opts, cyclers, trackers = {}, {}, {}, {}
    for label, (regime, fewshot) in adapters.items():
        if not regime.uses_bank:
            raise ValueError(f"regime {regime.value} does not train a shift bank")
        if not len(fewshot):
            raise ValueError(f"adapter {label!r}: few-shot set is empty")
        banks[label] = init_shift_bank(net)
        opts[label] = AdamState.for_params(_bank_arrays(banks[label], regime.shift_components), config.beta)
        cyclers[label] = _Cycler(fewshot, config.target_batch, _target_rng(config.seed))
        trackers[label] = _Tracker(regime)
    src_tracker = _Tracker(Regime.NO_ADAPT)

    source_loss: float | None = None
    target_loss: dict[str, float | None] = {label: None for label in adapters}
    for it in range(config.iterations + 1):
        if it:
            source_loss = train_source_step(net, params, src_batches.next(), src_opt)
            for label, (regime, _) in adapters.items():
                terms = adapt_step(net, params, banks[label], cyclers[label].next(), config.lam,
                                   opts[label], regime.shift_components)
                target_loss[label] = terms.total
        if not _is_eval(it, config):
            continue
        if track_source:
            mae = val_mae(net, params, target_val)
            src_tracker.offer(net, config, it, mae, params)
            src_tracker.rows.append(LogRow(it, source_loss, None, mae))
        for label in adapters:
            mae = val_mae(net, apply_nlt(params, banks[label]), target_val)
            trackers[label].offer(net, config, it, mae, params, banks[label])
            trackers[label].rows.append(LogRow(it, source_loss, target_loss[label], mae))

    steps = {"source_steps": src_opt.step_count}
    out = {}
    if track_source:
        out["no_adapt"] = src_tracker.finish(**steps)
    for label in adapters:
        out[label] = trackers[label].finish(**steps, bank_steps=opts[label].step_count)
    if logs is not None:
        if track_source:
            logs["no_adapt"] = src_tracker.rows
        for label in adapters:
            logs[label] = trackers[label].rows
    return out


def run_joint_loop(
    net: CounterNet,
    source_train: Sequence[Sample],
    target_fewshot: Sequence[Sample],
    target_val: Sequence[Sample],
    config: TrainConfig,
    regime: Regime = Regime.NLT,
    log: list[LogRow] | None = None,
) -> Checkpoint:
    """Alternate one source step and one shift-bank step per iteration.

    Validation MAE of the transformed model is measured every ``val_interval``
    iterations and at the end; the best snapshot is returned.
    """
    regime = Regime(regime)
    logs: dict[str, list[LogRow]] = {}
    result = run_shared_stream(net, source_train, {regime.value: (regime, target_fewshot)}, target_val,
                               config, track_source=False, logs=logs)
    if log is not None:
        log.extend(logs[regime.value])
    return result[regime.value]


def _target_training(
    net: CounterNet,
    start: Mapping[str, np.ndarray],
    fewshot: Sequence[Sample],
    target_val: Sequence[Sample],
    config: TrainConfig,
    regime: Regime,
    keys: Sequence[str],
    lr: float,
    log: list[LogRow] | None,
    iteration_offset: int = 0,
) -> Checkpoint:
    params = {k: v.copy() for k, v in start.items()}
    opt = AdamState.for_params([params[k] for k in keys], lr)
    batches = _Cycler(fewshot, config.target_batch, _target_rng(config.seed))
    tracker = _Tracker(regime)
    loss = None
    for it in range(config.iterations + 1):
        if it:
            loss = finetune_step(net, params, batches.next(), opt, keys)
        if _is_eval(it, config):
            mae = val_mae(net, params, target_val)
            tracker.offer(net, config, iteration_offset + it, mae, params)
            tracker.rows.append(LogRow(iteration_offset + it, None, loss, mae))
    if log is not None:
        log.extend(tracker.rows)
    return tracker.finish(target_steps=opt.step_count)


def trainable_names(regime: Regime, net: CounterNet) -> set[str]:
    """Names of the parameters a regime is allowed to change.

    Source parameters are ``conv{i}.weight`` / ``conv{i}.bias``; shift
    parameters are ``shift.conv{i}.factor`` / ``shift.conv{i}.bias``. For the
    joint NLT regimes the source parameters also train (on source data only).
    """
    regime = Regime(regime)
    all_src = set(net.param_shapes())
    if regime in (Regime.NO_ADAPT, Regime.SUPERVISED, Regime.FINETUNE_ALL):
        return all_src
    if regime is Regime.FINETUNE_DECODER:
        return {k for k in all_src if k.split(".")[0] in _decoder_tail(net)}
    if regime.uses_bank:
        return all_src | {f"shift.{n}.{c}" for n in net.conv_names for c in regime.shift_components}
    raise ValueError(f"regime {regime.value} has no trainable set")


def _decoder_tail(net: CounterNet, n: int = 4) -> list[str]:
    """The last ``n`` conv layers (the decoder's tail)."""
    return net.conv_names[-n:]


def run_regime(
    regime: Regime | str,
    net: CounterNet,
    source_train: Sequence[Sample],
    target_fewshot: Sequence[Sample],
    target_val: Sequence[Sample],
    config: TrainConfig,
    source_checkpoint: Checkpoint | None = None,
    log: list[LogRow] | None = None,
) -> Checkpoint:
    """Train under one of the comparison regimes and return the best-on-validation checkpoint.

    ``no_adapt`` trains on source data only. ``supervised`` trains a fresh
    model on the few-shot set only. ``finetune_all`` / ``finetune_decoder``
    start from the no-adaptation result (``source_checkpoint`` if given,
    otherwise trained here) and update all / the last four conv layers on
    the few-shot set. The three NLT regimes run the joint loop.
    """
    regime = Regime(regime)
    if regime is Regime.IFS_NLT:
        raise ValueError("ifs_nlt needs an image-translation front end, which this package does not provide")
    if regime is Regime.NO_ADAPT:
        logs: dict[str, list[LogRow]] = {}
        ckpt = run_shared_stream(net, source_train, {}, target_val, config, logs=logs)["no_adapt"]
        if log is not None:
            log.extend(logs["no_adapt"])
        return ckpt
    if regime.uses_bank:
        if not len(target_fewshot):
            raise ValueError(f"regime {regime.value} needs a non-empty few-shot set")
        return run_joint_loop(net, source_train, target_fewshot, target_val, config, regime, log)
    if not len(target_fewshot):
        raise ValueError(f"regime {regime.value} needs a non-empty few-shot set")
    if regime is Regime.SUPERVISED:
        keys = list(net.params)
        return _target_training(net, net.params, target_fewshot, target_val, config, regime, keys,
                                config.alpha, log)

    if source_checkpoint is None:
        source_checkpoint = run_regime(Regime.NO_ADAPT, net, source_train, (), target_val, config, log=log)
    if source_checkpoint.bank is not None:
        raise ValueError("fine-tuning starts from a source-only checkpoint, got one with a shift bank")
    keys = sorted(trainable_names(regime, net), key=list(net.params).index)
    return _target_training(net, source_checkpoint.params, target_fewshot, target_val, config, regime,
                            keys, config.beta, log, iteration_offset=config.iterations)
