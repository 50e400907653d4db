"""Run configuration: an INI file with fixed sections and keys.

Unknown sections or keys are rejected, every value is validated at parse
time, and :meth:`RunConfig.to_text` writes the fully resolved configuration
back out in a form :func:`parse_config` reads to an equal object.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SOURCE_DOMAIN, TARGET_DOMAIN, DomainSpec
from .training import Regime, TrainConfig

__all__ = ["RunConfig", "ConfigError", "parse_config", "load_config", "OUTPUT_ROOT_ENV"]

OUTPUT_ROOT_ENV = "NLT_OUTPUT_ROOT"
_NET_CONFIGS = ("desk_small", "paper_vgg16")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    source: DomainSpec = SOURCE_DOMAIN
    target: DomainSpec = TARGET_DOMAIN
    source_train: int = 400
    target_train: int = 100
    target_val: int = 20
    target_test: int = 50
    scene_regularization: bool = True
    data_dir: Path | None = None
    net: str = "desk_small"
    output_scale: float = 0.01
    train: TrainConfig = field(default_factory=TrainConfig)
    regime: Regime = Regime.NLT
    few_shot_ratio: float = 0.1
    regimes: tuple[Regime, ...] = (Regime.NO_ADAPT, Regime.FINETUNE_ALL, Regime.FINETUNE_DECODER, Regime.NLT)
    ratios: tuple[float, ...] = (0.05, 0.1, 0.3, 0.5)
    checkpoint: Path | None = None
    stats_layers: tuple[int, ...] = ()
    plot: bool = False
    output_dir: Path | None = None

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed))

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, spec in (("source", self.source), ("target", self.target)):
            cp[section] = {
                "name": spec.name,
                "count_range": f"{spec.count_range[0]}, {spec.count_range[1]}",
                "blob_sigma_px": repr(spec.blob_sigma_px),
                "background": spec.background,
                "brightness": repr(spec.brightness),
                "noise_std": repr(spec.noise_std),
                "image_size": f"{spec.image_size[0]}, {spec.image_size[1]}",
            }
        cp["data"] = {
            "source_train": str(self.source_train),
            "target_train": str(self.target_train),
            "target_val": str(self.target_val),
            "target_test": str(self.target_test),
            "scene_regularization": str(self.scene_regularization).lower(),
            "data_dir": str(self.data_dir) if self.data_dir else "",
        }
        cp["model"] = {"net": self.net, "output_scale": repr(self.output_scale)}
        cp["train"] = {f.name: repr(getattr(self.train, f.name)) for f in fields(TrainConfig)}
        cp["run"] = {
            "regime": self.regime.value,
            "few_shot_ratio": repr(self.few_shot_ratio),
            "regimes": ", ".join(r.value for r in self.regimes),
            "ratios": ", ".join(repr(r) for r in self.ratios),
            "checkpoint": str(self.checkpoint) if self.checkpoint else "",
            "stats_layers": ", ".join(str(i) for i in self.stats_layers),
            "plot": str(self.plot).lower(),
            "output_dir": str(self.output_dir) if self.output_dir else "",
        }
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)


_SCHEMA = {
    "source": {"name", "count_range", "blob_sigma_px", "background", "brightness", "noise_std", "image_size"},
    "target": {"name", "count_range", "blob_sigma_px", "background", "brightness", "noise_std", "image_size"},
    "data": {"source_train", "target_train", "target_val", "target_test", "scene_regularization", "data_dir"},
    "model": {"net", "output_scale"},
    "train": {f.name for f in fields(TrainConfig)},
    "run": {"regime", "few_shot_ratio", "regimes", "ratios", "checkpoint", "stats_layers", "plot", "output_dir"},
}


def _pair(text: str, key: str) -> tuple[int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected two comma-separated integers, got {text!r}")
    return int(parts[0]), int(parts[1])


def _list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _path(text: str, base: Path) -> Path | None:
    text = text.strip()
    if not text:
        return None
    p = Path(text)
    return p if p.is_absolute() else (base / p).resolve()


def _domain(section: configparser.SectionProxy, default: DomainSpec) -> DomainSpec:
    kw = {}
    if "name" in section:
        kw["name"] = section["name"].strip()
    if "count_range" in section:
        kw["count_range"] = _pair(section["count_range"], f"[{section.name}] count_range")
    if "image_size" in section:
        kw["image_size"] = _pair(section["image_size"], f"[{section.name}] image_size")
    for key in ("blob_sigma_px", "brightness", "noise_std"):
        if key in section:
            kw[key] = float(section[key])
    if "background" in section:
        kw["background"] = section["background"].strip()
    return replace(default, **kw)


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    """Parse INI text; relative paths resolve against ``base_dir``."""
    base = Path(base_dir).resolve()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        unknown = sorted(set(cp[section]) - _SCHEMA[section])
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")

    def get(section: str) -> configparser.SectionProxy | dict:
        return cp[section] if cp.has_section(section) else {}

    try:
        cfg = RunConfig()
        kw: dict = {}
        if cp.has_section("source"):
            kw["source"] = _domain(cp["source"], SOURCE_DOMAIN)
        if cp.has_section("target"):
            kw["target"] = _domain(cp["target"], TARGET_DOMAIN)
        data = get("data")
        for key in ("source_train", "target_train", "target_val", "target_test"):
            if key in data:
                kw[key] = int(data[key])
                if kw[key] < 0:
                    raise ConfigError(f"[data] {key} must be >= 0, got {kw[key]}")
        if "scene_regularization" in data:
            kw["scene_regularization"] = _bool(data["scene_regularization"], "[data] scene_regularization")
        if "data_dir" in data:
            kw["data_dir"] = _path(data["data_dir"], base)
            if kw["data_dir"] is not None and not kw["data_dir"].is_dir():
                raise ConfigError(f"[data] data_dir {kw['data_dir']} does not exist")

        model = get("model")
        if "net" in model:
            kw["net"] = model["net"].strip()
            if kw["net"] not in _NET_CONFIGS:
                raise ConfigError(f"[model] net must be one of {', '.join(_NET_CONFIGS)}, got {kw['net']!r}")
        if "output_scale" in model:
            kw["output_scale"] = float(model["output_scale"])
            if not kw["output_scale"] > 0:
                raise ConfigError(f"[model] output_scale must be > 0, got {kw['output_scale']}")

        train = get("train")
        tkw = {}
        for f in fields(TrainConfig):
            if f.name in train:
                tkw[f.name] = (int if f.type in (int, "int") else float)(train[f.name])
        kw["train"] = TrainConfig(**tkw)

        run = get("run")
        if "regime" in run:
            kw["regime"] = _regime(run["regime"])
        if "few_shot_ratio" in run:
            kw["few_shot_ratio"] = _ratio(run["few_shot_ratio"])
        if "regimes" in run:
            kw["regimes"] = tuple(_regime(r) for r in _list(run["regimes"]))
            dupes = sorted({r.value for r in kw["regimes"] if kw["regimes"].count(r) > 1})
            if dupes:
                raise ConfigError(f"[run] regimes lists {', '.join(dupes)} more than once")
        if "ratios" in run:
            kw["ratios"] = tuple(_ratio(r) for r in _list(run["ratios"]))
        if "checkpoint" in run:
            kw["checkpoint"] = _path(run["checkpoint"], base)
            if kw["checkpoint"] is not None and not kw["checkpoint"].is_file():
                raise ConfigError(f"[run] checkpoint {kw['checkpoint']} does not exist")
        if "stats_layers" in run:
            kw["stats_layers"] = tuple(int(i) for i in _list(run["stats_layers"]))
        if "plot" in run:
            kw["plot"] = _bool(run["plot"], "[run] plot")
        if "output_dir" in run:
            kw["output_dir"] = _path(run["output_dir"], base)
        return replace(cfg, **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _regime(text: str) -> Regime:
    try:
        return Regime(text.strip())
    except ValueError:
        raise ConfigError(f"unknown regime {text.strip()!r}; choose from {', '.join(r.value for r in Regime)}") from None


def _ratio(text: str) -> float:
    r = float(text)
    if not 0 < r <= 1:
        raise ConfigError(f"few-shot ratio must lie in (0, 1], got {r}")
    return r


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)
