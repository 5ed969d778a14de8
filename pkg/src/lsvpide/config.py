"""YAML run configurations: model, instrument, grid, solver and command options."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .diffusion import SolverConfig
from .model import ModelSpec, model_from_dict, model_to_dict
from .pricer import AxisSpec, GridSpec, InstrumentSpec, JumpOptions


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass
class RunConfig:
    model: ModelSpec
    instrument: InstrumentSpec
    grid: GridSpec
    solver: SolverConfig
    spot: tuple[float, float, float]
    jumps: JumpOptions = JumpOptions()
    output: Path = Path("out")
    options: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def digest(self) -> str:
        """Short hash of the resolved configuration, written into every CSV."""
        blob = json.dumps(self.source, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: Any, what: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{what}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def _load_yaml(path: Path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_run_config(data: dict, base: Path = Path(".")) -> RunConfig:
    """Validate a configuration mapping; ``base`` resolves a model given as a file path."""
    required = ("model", "instrument", "grid", "spot")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"missing sections: {missing}")
    model_src = data["model"]
    if isinstance(model_src, str):
        path = Path(model_src)
        path = path if path.is_absolute() else base / path
        if not path.exists():
            raise ConfigError(f"model file {path} does not exist")
        model_src = _load_yaml(path)
    try:
        model = model_from_dict(model_src)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    inst = _build(InstrumentSpec, data["instrument"], "instrument")
    grid_raw = data["grid"]
    if not isinstance(grid_raw, dict) or not all(k in grid_raw for k in "svr"):
        raise ConfigError("grid: needs s, v and r axes")
    axes = {k: _build(AxisSpec, grid_raw[k], f"grid.{k}") for k in "svr"}
    extra = {k: v for k, v in grid_raw.items() if k not in "svr"}
    grid = _build(GridSpec, {**axes, **extra}, "grid")
    solver = _build(SolverConfig, data.get("solver", {}), "solver")
    jumps = _build(JumpOptions, data.get("jumps", {}), "jumps")
    spot_raw = data["spot"]
    try:
        spot = (float(spot_raw["s"]), float(spot_raw["v"]), float(spot_raw["r"]))
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError("spot: needs numeric s, v and r") from exc
    options = data.get("options", {}) or {}
    if not isinstance(options, dict):
        raise ConfigError("options: expected a mapping")
    source = dict(data)
    source["model"] = model_to_dict(model)
    return RunConfig(model, inst, grid, solver, spot, jumps, Path(data.get("output", "out")), options, source)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_run_config(_load_yaml(path), path.parent)


def bundled_config_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("lsvpide.configs").iterdir() if p.name.endswith(".yaml"))


def load_bundled(name: str) -> RunConfig:
    """One of the configurations shipped with the package (e.g. ``european_call``)."""
    res = resources.files("lsvpide.configs") / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(f"no bundled config {name!r}; available: {bundled_config_names()}")
    return parse_run_config(yaml.safe_load(res.read_text()))


def config_to_dict(cfg: RunConfig) -> dict:
    grid = {k: asdict(getattr(cfg.grid, k)) for k in "svr"}
    grid["ghosts"] = cfg.grid.ghosts
    return {"model": model_to_dict(cfg.model), "instrument": asdict(cfg.instrument), "grid": grid,
            "solver": asdict(cfg.solver), "jumps": asdict(cfg.jumps),
            "spot": dict(zip("svr", cfg.spot)), "output": str(cfg.output), "options": cfg.options}
