"""Desk experiments: dataset assembly, regime comparison and few-shot sweeps.

Regimes that share a source trajectory (no adaptation and every NLT
variant, at every few-shot ratio) are driven from one source stream, and
both fine-tuning regimes start from the no-adaptation checkpoint of that
same stream. Each result is identical to running the regime on its own.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .counter import CounterNet
from .data import DatasetSplit, DomainSpec, Sample, build_split, scene_regularization
from .metrics import MetricsReport, evaluate
from .training import Checkpoint, LogRow, Regime, TrainConfig, run_regime, run_shared_stream, select_few_shot

__all__ = [
    "ExperimentData",
    "RegimeResult",
    "SweepRow",
    "make_data",
    "split_hash",
    "compare_regimes",
    "sweep_ratios",
    "format_table",
    "table_to_csv",
    "csv_to_table",
]

# Source and target scenes for run seed s use seeds s*_STRIDE + j and
# s*_STRIDE + _STRIDE//2 + j, so no scene seed is ever shared.
_STRIDE = 1_000_000


@dataclass
class ExperimentData:
    source_train: list[Sample]
    target: DatasetSplit


def make_data(source: DomainSpec, target: DomainSpec, sizes: Mapping[str, int], seed: int,
              regularize: bool = True) -> ExperimentData:
    """Source training scenes and target train/val/test splits for one run seed.

    With ``regularize`` the source set keeps only scenes whose count lies in
    the target's count range.
    """
    src = build_split(source, (sizes["source_train"], 0, 0), seed * _STRIDE).train
    if regularize:
        src = scene_regularization(src, target.count_range)
    tgt = build_split(target, (sizes["target_train"], sizes["target_val"], sizes["target_test"]),
                      seed * _STRIDE + _STRIDE // 2)
    return ExperimentData(src, tgt)


def split_hash(samples: Sequence[Sample]) -> str:
    """SHA-256 over images and density maps, identifying a split exactly."""
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.image, "<f4").tobytes())
        h.update(np.ascontiguousarray(s.density, "<f4").tobytes())
    return h.hexdigest()


@dataclass
class RegimeResult:
    regime: Regime
    checkpoint: Checkpoint
    report: MetricsReport
    log: list[LogRow]


def compare_regimes(net: CounterNet, data: ExperimentData, regimes: Sequence[Regime | str], ratio: float,
                    config: TrainConfig) -> dict[Regime, RegimeResult]:
    """Train every regime on the same data and seed; evaluate on the target test split."""
    regimes = [Regime(r) for r in regimes]
    if len(set(regimes)) != len(regimes):
        raise ValueError("duplicate regime in comparison list")
    if Regime.IFS_NLT in regimes:
        raise ValueError("ifs_nlt needs an image-translation front end, which this package does not provide")
    fewshot = select_few_shot(data.target.train, ratio, config.seed)
    bank_regimes = [r for r in regimes if r.uses_bank]
    needs_source = any(r in regimes for r in (Regime.NO_ADAPT, Regime.FINETUNE_ALL, Regime.FINETUNE_DECODER))

    logs: dict[str, list[LogRow]] = {}
    ckpts: dict[Regime, Checkpoint] = {}
    if bank_regimes or needs_source:
        shared = run_shared_stream(net, data.source_train, {r.value: (r, fewshot) for r in bank_regimes},
                                   data.target.val, config, track_source=needs_source, logs=logs)
        for r in bank_regimes:
            ckpts[r] = shared[r.value]
        if needs_source:
            ckpts[Regime.NO_ADAPT] = shared["no_adapt"]
    for r in regimes:
        if r in ckpts:
            continue
        log: list[LogRow] = []
        ckpts[r] = run_regime(r, net, data.source_train, fewshot, data.target.val, config,
                              source_checkpoint=ckpts.get(Regime.NO_ADAPT), log=log)
        logs[r.value] = log

    out = {}
    for r in regimes:
        report = evaluate(net, ckpts[r].target_params(), data.target.test)
        out[r] = RegimeResult(r, ckpts[r], report, logs.get(r.value, []))
    return out


@dataclass(frozen=True)
class SweepRow:
    ratio: float
    regime: str
    mae: float
    mse: float


def sweep_ratios(net: CounterNet, data: ExperimentData, ratios: Sequence[float], config: TrainConfig,
                 regimes: Sequence[Regime | str] = (Regime.NLT, Regime.SUPERVISED)) -> list[SweepRow]:
    """MAE/MSE per (ratio, regime); NLT banks for all ratios share one source stream."""
    regimes = [Regime(r) for r in regimes]
    for ratio in ratios:
        if not 0 < ratio <= 1:
            raise ValueError(f"few-shot ratio must lie in (0, 1], got {ratio}")
    if len(set(ratios)) != len(ratios):
        raise ValueError("duplicate ratio in sweep list")
    fewshots = {ratio: select_few_shot(data.target.train, ratio, config.seed) for ratio in ratios}
    bank_regimes = [r for r in regimes if r.uses_bank]
    shared = {}
    if bank_regimes:
        adapters = {f"{r.value}@{ratio!r}": (r, fewshots[ratio]) for r in bank_regimes for ratio in ratios}
        shared = run_shared_stream(net, data.source_train, adapters, data.target.val, config, track_source=False)
    rows = []
    for ratio in ratios:
        for r in regimes:
            if r.uses_bank:
                ck = shared[f"{r.value}@{ratio!r}"]
            else:
                ck = run_regime(r, net, data.source_train, fewshots[ratio], data.target.val, config)
            rep = evaluate(net, ck.target_params(), data.target.test)
            rows.append(SweepRow(ratio, r.value, rep.mae, rep.mse))
    return rows


# ------------------------------------------------------------------- tables


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Left-aligned text table; floats printed with 4 decimals."""
    cells = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return "\n".join(lines) + "\n"


def table_to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def csv_to_table(text: str) -> tuple[list[str], list[list]]:
    """Inverse of :func:`table_to_csv`; numeric-looking cells come back as int or float."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)

    def conv(v: str):
        for t in (int, float):
            try:
                return t(v)
            except ValueError:
                pass
        return v

    return header, [[conv(v) for v in row] for row in reader]
