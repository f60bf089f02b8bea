"""Experiment configuration: JSON file with ``//`` comment lines, validated into dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dynamics import BankRunParams
from .errors import ConfigError

__all__ = [
    "ApproxConfig",
    "BsdeConfig",
    "ExperimentConfig",
    "FixedPointConfig",
    "GridConfig",
    "NPlayerConfig",
    "config_hash",
    "default_config_path",
    "load_config",
    "parse_config",
]

SCHEMA_VERSION = 1


@dataclass
class GridConfig:
    n_time: int = 2
    n_quant: int = 1
    grid_sample: int = 1000
    min_occupancy: int = 125


@dataclass
class FixedPointConfig:
    n_paths: int = 5000          # particles per atom
    damping: float = 0.5
    tol: float = 0.02
    max_iter: int = 30
    mode: str = "direct"
    check_floor: bool = True


@dataclass
class BsdeConfig:
    degree: int = 2


@dataclass
class NPlayerConfig:
    n_players: list = field(default_factory=lambda: [64, 256, 512])
    reps: int = 64
    br_paths_per_rep: int = 64
    n_randomized: int = 4


@dataclass
class ApproxConfig:
    levels: list = field(default_factory=lambda: [0, 1, 2])
    n_players: int = 256
    reps: int = 32
    inner_batch: int = 16
    grid_sample: int = 4000


@dataclass
class ExperimentConfig:
    scenario: str = "bankrun"
    model: dict = field(default_factory=dict)
    grid: GridConfig = field(default_factory=GridConfig)
    fixed_point: FixedPointConfig = field(default_factory=FixedPointConfig)
    bsde: BsdeConfig = field(default_factory=BsdeConfig)
    nplayer: NPlayerConfig = field(default_factory=NPlayerConfig)
    approx: ApproxConfig = field(default_factory=ApproxConfig)
    seed: int = 0
    workers: int = 1
    output: str = "runs/bankrun"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "grid": GridConfig,
    "fixed_point": FixedPointConfig,
    "bsde": BsdeConfig,
    "nplayer": NPlayerConfig,
    "approx": ApproxConfig,
}


def default_config_path() -> Path:
    return Path(__file__).with_name("configs") / "bankrun.json"


def _strip_comments(text: str) -> str:
    return "\n".join(line for line in text.splitlines() if not line.lstrip().startswith("//"))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(_strip_comments(path.read_text()))
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)


def _coerce(value: Any, default: Any, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(where, f"expected a list of integers, got {value!r}")
        return list(value)
    return value


def _fill(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(prefix, f"expected a table, got {type(raw).__name__}")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        where = f"{prefix}.{key}"
        if key not in names:
            raise ConfigError(where, "unknown field")
        out[key] = _coerce(value, getattr(defaults, key), where)
    return cls(**out)


def parse_config(raw: dict) -> ExperimentConfig:
    """Build and validate a config from a decoded JSON object."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    base = ExperimentConfig()
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _fill(_SECTIONS[key], value, key)
        elif key == "model":
            if not isinstance(value, dict):
                raise ConfigError("model", "expected a table of scenario parameters")
            kwargs[key] = dict(value)
        elif key in ("scenario", "seed", "workers", "output"):
            kwargs[key] = _coerce(value, getattr(base, key), key)
        else:
            raise ConfigError(key, "unknown field")
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def _positive(value, where):
    if value <= 0:
        raise ConfigError(where, f"must be positive, got {value!r}")


def validate(cfg: ExperimentConfig) -> None:
    """Static checks; the noise-floor check on ``tol`` happens when the solver runs."""
    if cfg.scenario == "bankrun":
        known = {f.name for f in dataclasses.fields(BankRunParams)}
        defaults = BankRunParams()
        for key, value in cfg.model.items():
            if key not in known:
                raise ConfigError(f"model.{key}", "unknown bank-run parameter")
            cfg.model[key] = _coerce(value, getattr(defaults, key), f"model.{key}")
        n_steps = cfg.model.get("n_steps", defaults.n_steps)
        _positive(n_steps, "model.n_steps")
        if n_steps % 2**cfg.grid.n_time:
            raise ConfigError("grid.n_time", f"2**n_time must divide model.n_steps = {n_steps}")
    elif not cfg.scenario.endswith(".py"):
        raise ConfigError("scenario", "expected 'bankrun' or a path to a .py scenario file")
    if cfg.seed < 0:
        raise ConfigError("seed", "must be non-negative")
    _positive(cfg.workers, "workers")
    g = cfg.grid
    if g.n_time < 0 or g.n_quant < 0:
        raise ConfigError("grid.n_time" if g.n_time < 0 else "grid.n_quant", "must be non-negative")
    _positive(g.grid_sample, "grid.grid_sample")
    _positive(g.min_occupancy, "grid.min_occupancy")
    if g.min_occupancy > g.grid_sample:
        raise ConfigError("grid.min_occupancy", "cannot exceed grid.grid_sample")
    fp = cfg.fixed_point
    _positive(fp.n_paths, "fixed_point.n_paths")
    _positive(fp.tol, "fixed_point.tol")
    _positive(fp.max_iter, "fixed_point.max_iter")
    if not 0 < fp.damping <= 1:
        raise ConfigError("fixed_point.damping", f"must lie in (0, 1], got {fp.damping}")
    if fp.mode not in ("direct", "girsanov"):
        raise ConfigError("fixed_point.mode", f"expected 'direct' or 'girsanov', got {fp.mode!r}")
    _positive(cfg.bsde.degree, "bsde.degree")
    npc = cfg.nplayer
    if not npc.n_players:
        raise ConfigError("nplayer.n_players", "needs at least one population size")
    for i, n in enumerate(npc.n_players):
        if n < 2:
            raise ConfigError(f"nplayer.n_players[{i}]", f"needs at least 2 players, got {n}")
    if npc.reps < 2:
        raise ConfigError("nplayer.reps", "needs at least 2 replications for a confidence interval")
    _positive(npc.br_paths_per_rep, "nplayer.br_paths_per_rep")
    if npc.n_randomized < 0:
        raise ConfigError("nplayer.n_randomized", "must be non-negative")
    ap = cfg.approx
    for i, n in enumerate(ap.levels):
        if n < 0:
            raise ConfigError(f"approx.levels[{i}]", "must be non-negative")
    for name in ("n_players", "reps", "inner_batch", "grid_sample"):
        _positive(getattr(ap, name), f"approx.{name}")


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
