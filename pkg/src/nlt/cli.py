"""``nlt`` command line: generate, train, compare, stats, sweep.

Every command writes the fully resolved configuration to ``config.ini`` in
its output directory; rerunning from that file reproduces checkpoints and
logs bitwise. Outputs are staged in a hidden sibling directory and moved
into place only when the command succeeds.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Iterator, Sequence


from . import __version__
from .analysis import (
    classify_shift,
    histogram_to_text,
    kernel_mean_histogram,
    layer_shift_means,
    plot_layer_means,
    stats_to_text,
)
from .config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, load_config
from .counter import CounterNet, build_counter
from .data import DatasetSplit, dump_split, load_split, scene_regularization
from .experiment import (
    ExperimentData,
    compare_regimes,
    format_table,
    make_data,
    split_hash,
    sweep_ratios,
    table_to_csv,
)
from .metrics import evaluate
from .training import LogRow, Regime, load_checkpoint, run_regime, save_checkpoint, select_few_shot

LOG_HEADER = "iter,source_loss,target_loss,val_mae"


class CommandError(Exception):
    """A user-facing failure: printed as one line, exit status 1."""


# ------------------------------------------------------------------ plumbing


@contextmanager
def staged(out: Path) -> Iterator[Path]:
    """Yield a temp directory whose entries replace those in ``out`` on success."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for entry in sorted(tmp.iterdir()):
        dest = out / entry.name
        if dest.is_dir() and not dest.is_symlink():
            shutil.rmtree(dest)
        os.replace(entry, dest)
    tmp.rmdir()


def _resolve_out(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out).resolve()
    if cfg.output_dir is not None:
        return cfg.output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV) or "nlt-runs"
    return (Path(root) / args.command).resolve()


def _net(cfg: RunConfig) -> CounterNet:
    return build_counter(cfg.net, seed=cfg.seed, in_channels=1, output_scale=cfg.output_scale)


def _sizes(cfg: RunConfig) -> dict[str, int]:
    return {
        "source_train": cfg.source_train,
        "target_train": cfg.target_train,
        "target_val": cfg.target_val,
        "target_test": cfg.target_test,
    }


def _data(cfg: RunConfig) -> ExperimentData:
    if cfg.data_dir is None:
        return make_data(cfg.source, cfg.target, _sizes(cfg), cfg.seed, cfg.scene_regularization)
    d = cfg.data_dir
    try:
        src = load_split(d / "source" / "train", cfg.source.image_size)
        tgt = DatasetSplit(*(load_split(d / "target" / s, cfg.target.image_size) for s in ("train", "val", "test")))
    except FileNotFoundError as exc:
        raise CommandError(f"dataset under {d} is incomplete: {exc.filename} missing") from None
    if not src:
        raise CommandError(f"no source training scenes found under {d / 'source' / 'train'}")
    if cfg.scene_regularization:
        src = scene_regularization(src, cfg.target.count_range)
    return ExperimentData(src, tgt)


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _log_text(rows: Sequence[LogRow]) -> str:
    return LOG_HEADER + "\n" + "".join(r.to_text() + "\n" for r in rows)


def _echo(tmp: Path, cfg: RunConfig, out: Path) -> None:
    _write(tmp / "config.ini", replace(cfg, output_dir=out).to_text())


# ------------------------------------------------------------------ commands


def cmd_generate(cfg: RunConfig, out: Path) -> None:
    data = make_data(cfg.source, cfg.target, _sizes(cfg), cfg.seed, regularize=False)
    splits = {"source": DatasetSplit(data.source_train, [], []), "target": data.target}
    with staged(out) as tmp:
        _echo(tmp, replace(cfg, data_dir=None), out)
        lines = [f"seed={cfg.seed}"]
        for domain, split in splits.items():
            for name, samples in split.items():
                dump_split(samples, tmp / "data" / domain / name)
                lines.append(f"{domain}/{name}={len(samples)} sha256={split_hash(samples)}")
        _write(tmp / "manifest.txt", "\n".join(lines) + "\n")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    if cfg.regime is Regime.IFS_NLT:
        raise CommandError("regime ifs_nlt needs an image-translation front end, which this package does not provide")
    net = _net(cfg)
    data = _data(cfg)
    fewshot = [] if cfg.regime is Regime.NO_ADAPT else select_few_shot(data.target.train, cfg.few_shot_ratio, cfg.seed)
    log: list[LogRow] = []
    ckpt = run_regime(cfg.regime, net, data.source_train, fewshot, data.target.val, cfg.train, log=log)
    report = evaluate(net, ckpt.target_params(), data.target.test)
    with staged(out) as tmp:
        _echo(tmp, cfg, out)
        save_checkpoint(ckpt, tmp / "checkpoint.ckpt")
        _write(tmp / "log.csv", _log_text(log))
        _write(tmp / "report.txt", report.to_text())


_METRIC_HEADER = ["regime", "mae", "mse", "psnr", "ssim"]


def cmd_compare(cfg: RunConfig, out: Path) -> None:
    if len(cfg.regimes) < 2:
        raise CommandError(f"compare needs at least 2 regimes, config lists {len(cfg.regimes)}")
    net = _net(cfg)
    data = _data(cfg)
    results = compare_regimes(net, data, cfg.regimes, cfg.few_shot_ratio, cfg.train)
    rows = [[r.value, res.report.mae, res.report.mse, res.report.psnr, res.report.ssim] for r, res in results.items()]
    test_hash = split_hash(data.target.test)
    with staged(out) as tmp:
        _echo(tmp, cfg, out)
        _write(tmp / "compare.txt", f"target test split sha256={test_hash}\n" + format_table(_METRIC_HEADER, rows))
        _write(tmp / "compare.csv", table_to_csv(_METRIC_HEADER, rows))
        for r, res in results.items():
            save_checkpoint(res.checkpoint, tmp / f"{r.value}.ckpt")
            _write(tmp / f"{r.value}.log.csv", _log_text(res.log))


def cmd_stats(cfg: RunConfig, out: Path) -> None:
    if cfg.checkpoint is None:
        raise CommandError("stats needs [run] checkpoint in the config")
    ckpt = load_checkpoint(cfg.checkpoint)
    if ckpt.bank is None:
        raise CommandError(f"regime {ckpt.regime.value} has no shift parameters (checkpoint {cfg.checkpoint})")
    stats = layer_shift_means(ckpt.bank)
    category = classify_shift(stats)
    target = ckpt.target_params()
    names = [layer.name for layer in ckpt.bank]
    with staged(out) as tmp:
        _echo(tmp, cfg, out)
        _write(tmp / "shift_means.csv", stats_to_text(stats))
        _write(tmp / "category.txt", f"category={category.value}\n")
        for i in cfg.stats_layers:
            if not 0 <= i < len(names):
                raise CommandError(f"stats layer {i} out of range; checkpoint has {len(names)} conv layers")
            key = f"{names[i]}.weight"
            _write(tmp / f"hist_{names[i]}_source.csv", histogram_to_text(kernel_mean_histogram(ckpt.params[key])))
            _write(tmp / f"hist_{names[i]}_target.csv", histogram_to_text(kernel_mean_histogram(target[key])))
        if cfg.plot:
            plot_layer_means(stats, tmp / "shift_means.png")


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    if not cfg.ratios:
        raise CommandError("sweep needs at least one ratio in [run] ratios")
    net = _net(cfg)
    data = _data(cfg)
    rows = sweep_ratios(net, data, cfg.ratios, cfg.train)
    table = [[r.ratio, r.regime, r.mae, r.mse] for r in rows]
    header = ["ratio", "regime", "mae", "mse"]
    with staged(out) as tmp:
        _echo(tmp, cfg, out)
        _write(tmp / "sweep.txt", format_table(header, table))
        _write(tmp / "sweep.csv", table_to_csv(header, table))


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "compare": cmd_compare,
    "stats": cmd_stats,
    "sweep": cmd_sweep,
}


_HELP = {
    "generate": "write source and target dataset splits",
    "train": "train one regime; write checkpoint, log and test report",
    "compare": "train several regimes on shared data and tabulate test metrics",
    "stats": "per-layer shift statistics of an NLT checkpoint",
    "sweep": "NLT vs supervised across few-shot ratios",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlt", description="Neuron linear transformation desk experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=_HELP[name])
        sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int, help="override [train] seed")
        sp.add_argument("--out", help=f"output directory (default: [run] output_dir, else ${OUTPUT_ROOT_ENV}/<command>)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = _resolve_out(args, cfg)
        COMMANDS[args.command](cfg, out)
    except (ConfigError, CommandError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"nlt {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
