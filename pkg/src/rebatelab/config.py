"""Run configuration: a TOML file with [model], [train], [sweep] and [run] tables."""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .deep_bsde import TrainConfig
from .model import ALPHABET, APPLE, ModelParams, ParameterError

OUTPUT_ENV = "REBATELAB_OUTPUT"
PRESETS = {"apple": APPLE, "alphabet": ALPHABET}


class ConfigError(ValueError):
    pass


@dataclass
class SweepConfig:
    enabled: bool = True
    grid: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    budget: int = 200
    eval_batch: int = 256


@dataclass
class RunSection:
    output_dir: str = "run"
    emit_trajectories: bool = True
    d: float = 0.0
    seed: int = 0
    calibration_csv: str | None = None
    bar_interval: float = 1.0


@dataclass
class RunConfig:
    preset: str | None
    model: ModelParams
    train: TrainConfig
    sweep: SweepConfig
    run: RunSection

    def to_dict(self) -> dict:
        out = dict(model=self.model.to_dict(), train=asdict(self.train), sweep=asdict(self.sweep),
                   run={k: v for k, v in asdict(self.run).items() if v is not None})
        if self.preset is not None:
            out["preset"] = self.preset
        return out

    def output_path(self, override: str | None = None) -> Path:
        path = Path(override if override is not None else self.run.output_dir)
        root = os.environ.get(OUTPUT_ENV)
        if not path.is_absolute() and root:
            path = Path(root) / path
        return path


def _build(cls, table: dict, section: str, base=None):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {', '.join(unknown)}")
    try:
        if base is not None:
            return base.with_(**table)
        return cls(**table)
    except (TypeError, ValueError, ParameterError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    allowed = {"preset", "model", "train", "sweep", "run"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    preset = data.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {preset!r}")
    base = PRESETS[preset] if preset else ModelParams()
    for name in ("model", "train", "sweep", "run"):
        if not isinstance(data.get(name, {}), dict):
            raise ConfigError(f"[{name}] must be a table")
    model = _build(ModelParams, data.get("model", {}), "model", base=base)
    train = _build(TrainConfig, data.get("train", {}), "train")
    sweep = _build(SweepConfig, data.get("sweep", {}), "sweep")
    run = _build(RunSection, data.get("run", {}), "run")
    if not sweep.grid or list(sweep.grid) != sorted(sweep.grid):
        raise ConfigError("[sweep]: grid must be nonempty and sorted")
    sweep.grid = [float(d) for d in sweep.grid]
    return RunConfig(preset, model, train, sweep, run)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
