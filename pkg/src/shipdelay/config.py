"""Run configuration: one sectioned YAML file drives every subcommand."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import ColumnMap
from .model import ArchitectureConfig
from .synthgen import GeneratorConfig
from .training import TrainConfig

# search space of the tuned multitask model; values outside need allow_out_of_range
TUNING_RANGES = {
    "architecture.n_blocks": ("interval", 2, 12),
    "architecture.d_hidden": ("choice", (128, 192, 256, 320, 384)),
    "architecture.dropout": ("interval", 0.0, 0.5),
    "training.weight_decay": ("interval", 1e-6, 3e-3),
    "training.clip_norm": ("choice", (None, 1.0, 5.0)),
    "training.batch_size": ("choice", (256, 512, 1024, 2048)),
    "training.base_lr": ("interval", 1e-4, 1e-2),
}


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass(frozen=True)
class DataSection:
    path: str = "data/shipments.csv"
    columns: ColumnMap = field(default_factory=ColumnMap)
    split_ratios: tuple[float, float, float, float] = (0.7, 0.1, 0.1, 0.1)


@dataclass(frozen=True)
class ConformalSection:
    alpha: float = 0.2


@dataclass(frozen=True)
class OutputSection:
    checkpoint: str = "out/model.ckpt"
    history: str = "out/history.csv"
    report_csv: str = "out/report.csv"
    report_json: str = "out/report.json"
    predictions: str = "out/predictions.csv"


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    conformal: ConformalSection = field(default_factory=ConformalSection)
    output: OutputSection = field(default_factory=OutputSection)
    allow_out_of_range: bool = False
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else Path(os.path.normpath(self.base_dir / p))

    def echo(self) -> dict:
        """Fully resolved configuration, defaults included, as plain data."""
        return {
            "data": {
                "path": self.data.path,
                "columns": self.data.columns.to_dict(),
                "split_ratios": list(self.data.split_ratios),
            },
            "generator": self.generator.to_dict(),
            "architecture": self.architecture.to_dict(),
            "training": self.training.to_dict(),
            "conformal": dataclasses.asdict(self.conformal),
            "output": dataclasses.asdict(self.output),
            "allow_out_of_range": self.allow_out_of_range,
        }


def _build(cls, raw: Any, path: str, converters: dict | None = None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    kwargs = dict(raw)
    for key, conv in (converters or {}).items():
        if key in kwargs:
            try:
                kwargs[key] = conv(kwargs[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.{key}", str(exc)) from exc
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _check_types(obj, path: str) -> None:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        default = f.default if f.default is not dataclasses.MISSING else None
        if value is None and "None" in str(f.type):
            continue
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{path}.{f.name}", f"expected a boolean, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and not isinstance(value, int):
            raise ConfigError(f"{path}.{f.name}", f"expected an integer, got {value!r}")
        if isinstance(default, float) and not isinstance(value, (int, float)):
            raise ConfigError(f"{path}.{f.name}", f"expected a number, got {value!r}")


def _columns(raw) -> ColumnMap:
    if not isinstance(raw, dict):
        raise ValueError("expected a mapping")
    return ColumnMap.from_dict(raw)


def _ratios(raw) -> tuple[float, ...]:
    ratios = tuple(float(r) for r in raw)
    if len(ratios) != 4:
        raise ValueError("expected four ratios")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    return ratios


def check_tuning_ranges(cfg: RunConfig) -> None:
    for key, rule in TUNING_RANGES.items():
        section, name = key.split(".")
        value = getattr(getattr(cfg, section), name)
        if rule[0] == "interval":
            ok = rule[1] <= value <= rule[2]
            allowed = f"[{rule[1]}, {rule[2]}]"
        else:
            ok = value in rule[1]
            allowed = "{" + ", ".join(str(v) for v in rule[1]) + "}"
        if not ok:
            raise ConfigError(key, f"{value!r} outside tuning range {allowed} (use --allow-out-of-range)")


def config_from_dict(raw: dict | None, base_dir: Path = Path("."), allow_out_of_range: bool = False) -> RunConfig:
    raw = dict(raw or {})
    top = {"data", "generator", "architecture", "training", "conformal", "output", "allow_out_of_range"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    data = _build(DataSection, raw.get("data"), "data", {"columns": _columns, "split_ratios": _ratios})
    generator = _build(GeneratorConfig, raw.get("generator"), "generator")
    try:
        generator.validate()
    except ValueError as exc:
        raise ConfigError("generator", str(exc)) from exc
    arch = _build(ArchitectureConfig, raw.get("architecture"), "architecture", {"quantile_levels": tuple})
    training = _build(TrainConfig, raw.get("training"), "training")
    conformal = _build(ConformalSection, raw.get("conformal"), "conformal", {"alpha": float})
    if not 0.0 < conformal.alpha < 1.0:
        raise ConfigError("conformal.alpha", "must be in (0, 1)")
    output = _build(OutputSection, raw.get("output"), "output")
    for section, obj in (("generator", generator), ("training", training), ("architecture", arch)):
        _check_types(obj, section)
    flag = raw.get("allow_out_of_range", False)
    if not isinstance(flag, bool):
        raise ConfigError("allow_out_of_range", "expected a boolean")
    cfg = RunConfig(data, generator, arch, training, conformal, output, flag or allow_out_of_range, Path(base_dir))
    if not cfg.allow_out_of_range:
        check_tuning_ranges(cfg)
    return cfg


def load_config(path: str | Path, seed: int | None = None, allow_out_of_range: bool = False) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError("config", f"file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    cfg = config_from_dict(raw, path.parent, allow_out_of_range)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            generator=dataclasses.replace(cfg.generator, seed=seed),
            training=dataclasses.replace(cfg.training, seed=seed),
        )
    return cfg
