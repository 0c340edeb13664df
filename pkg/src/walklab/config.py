"""Typed, validated configuration for the experiment harness.

Every field is checked before any simulation starts; violations raise
ConfigError with a message naming the offending field. JSON is the
exchange format; "inf" is accepted where an unbounded threshold makes
sense (the decomposition's A grid).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

EXPERIMENT_KINDS = ("intersection-decomposition", "level-set-geometry", "range-intersection")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _as_int(data: dict, key: str, lo=None, hi=None, default=None) -> int:
    if key not in data:
        _require(default is not None, f"missing field '{key}'")
        return default
    v = data[key]
    _require(isinstance(v, int) and not isinstance(v, bool), f"field '{key}' must be an integer, got {v!r}")
    if lo is not None:
        _require(v >= lo, f"field '{key}' must be >= {lo}, got {v}")
    if hi is not None:
        _require(v <= hi, f"field '{key}' must be <= {hi}, got {v}")
    return v


def _as_float(data: dict, key: str, lo=None, hi=None, default=None, allow_inf=False) -> float:
    if key not in data:
        _require(default is not None, f"missing field '{key}'")
        return default
    v = data[key]
    if isinstance(v, str) and allow_inf and v.lower() in ("inf", "infinity"):
        return math.inf
    _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"field '{key}' must be a number, got {v!r}")
    v = float(v)
    _require(math.isfinite(v) or allow_inf, f"field '{key}' must be finite, got {v}")
    if lo is not None:
        _require(v >= lo, f"field '{key}' must be >= {lo}, got {v}")
    if hi is not None:
        _require(v <= hi, f"field '{key}' must be <= {hi}, got {v}")
    return v


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment run: kind, walk ensemble shape, tilt, and the
    kind-specific thresholds."""

    kind: str
    dim: int = 5
    seed: int = 0
    pairs: int = 10_000
    stop_radius: int = 25
    theta: float = 0.0
    return_target: int = 0
    tilt_max_steps: int = 200_000
    oracle_box_radius: int = 20
    # intersection-decomposition
    t: float = 0.0
    a_grid: tuple[float, ...] = ()
    # level-set-geometry
    level_n: int = 0
    level_m: int = 0
    vol_min: int = 0
    epsilon: float = 0.2
    # range-intersection
    min_exceedances: int = 10
    out: str | None = None

    @classmethod
    def from_json_dict(cls, data: dict) -> "ExperimentConfig":
        _require(isinstance(data, dict), "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in data:
            _require(key in known, f"unknown field '{key}'")
        kind = data.get("kind")
        _require(kind is not None, "missing field 'kind'")
        _require(kind in EXPERIMENT_KINDS, f"field 'kind' must be one of {EXPERIMENT_KINDS}, got {kind!r}")

        dim = _as_int(data, "dim", lo=3, hi=5, default=5)
        seed = _as_int(data, "seed", lo=0, default=0)
        pairs = _as_int(data, "pairs", lo=1, default=10_000)
        stop_radius = _as_int(data, "stop_radius", lo=4, hi=2000, default=25)
        theta = _as_float(data, "theta", lo=0.0, default=0.0)
        _require(theta < 1.0, f"field 'theta' must lie in [0, 1), got {theta}")
        return_target = _as_int(data, "return_target", lo=0, default=0)
        tilt_max_steps = _as_int(data, "tilt_max_steps", lo=1, default=200_000)
        oracle_box_radius = _as_int(data, "oracle_box_radius", lo=4, default=20)
        if theta > 0.0:
            _require(return_target >= 1, "field 'return_target' must be >= 1 when theta > 0")

        t = 0.0
        a_grid: tuple[float, ...] = ()
        level_n = level_m = vol_min = 0
        epsilon = 0.2
        min_exceedances = 10

        if kind == "intersection-decomposition":
            t = _as_float(data, "t", lo=1e-12)
            raw = data.get("a_grid")
            _require(isinstance(raw, list) and raw, "field 'a_grid' must be a nonempty list")
            vals = []
            for j, a in enumerate(raw):
                va = _as_float({"a": a}, "a", allow_inf=True)
                _require(va > 0, f"field 'a_grid[{j}]' must be positive, got {a!r}")
                vals.append(va)
            a_grid = tuple(vals)
        elif kind == "level-set-geometry":
            level_n = _as_int(data, "level_n", lo=1)
            level_m = _as_int(data, "level_m", lo=1)
            vol_min = _as_int(data, "vol_min", lo=1)
            epsilon = _as_float(data, "epsilon", lo=1e-9, default=0.2)
            _require(epsilon < 2.0 / dim, f"field 'epsilon' must be < 2/dim = {2.0 / dim:.4g}, got {epsilon}")
        else:  # range-intersection
            epsilon = _as_float(data, "epsilon", lo=1e-9, default=0.2)
            min_exceedances = _as_int(data, "min_exceedances", lo=2, default=10)

        out = data.get("out")
        if out is not None:
            _require(isinstance(out, str) and out, "field 'out' must be a nonempty string")

        return cls(
            kind=kind,
            dim=dim,
            seed=seed,
            pairs=pairs,
            stop_radius=stop_radius,
            theta=theta,
            return_target=return_target,
            tilt_max_steps=tilt_max_steps,
            oracle_box_radius=oracle_box_radius,
            t=t,
            a_grid=a_grid,
            level_n=level_n,
            level_m=level_m,
            vol_min=vol_min,
            epsilon=epsilon,
            min_exceedances=min_exceedances,
            out=out,
        )

    def to_json_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "dim": self.dim,
            "seed": self.seed,
            "pairs": self.pairs,
            "stop_radius": self.stop_radius,
            "theta": self.theta,
            "return_target": self.return_target,
            "tilt_max_steps": self.tilt_max_steps,
            "oracle_box_radius": self.oracle_box_radius,
        }
        if self.kind == "intersection-decomposition":
            d["t"] = self.t
            d["a_grid"] = ["inf" if math.isinf(a) else a for a in self.a_grid]
        elif self.kind == "level-set-geometry":
            d.update(level_n=self.level_n, level_m=self.level_m, vol_min=self.vol_min, epsilon=self.epsilon)
        else:
            d.update(epsilon=self.epsilon, min_exceedances=self.min_exceedances)
        if self.out is not None:
            d["out"] = self.out
        return d


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_json_dict(data)
