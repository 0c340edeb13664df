"""Command-line interface.

Every subcommand reads an optional JSON config, writes its outputs plus a
manifest into the output directory, and refuses to overwrite existing
files unless forced. Exit codes: 0 success, 2 configuration problems,
3 numeric failures.

Determinism contract: for a fixed (config, seed) the CSV and JSON
outputs are byte-identical regardless of --threads. Parallel kernels
chunk work by a fixed scheme independent of the thread count and merge
into disjoint per-replica slots, so there is no reduction-order noise.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .capacity import capacity_mc, equilibrium_solve, variational_lower_bound
from .config import ExperimentConfig, _as_float, _as_int, _require, load_config
from .errors import ConfigError, NumericError
from .experiments import (
    _write_csv,
    run_intersection_decomposition,
    run_level_set_geometry,
    run_range_intersection,
)
from .green import GreenOracle, green_box_solve
from .lattice import TruncatedInfinite, random_connected_set, simulate_local_times
from .moments import moment_bound_constant
from .rate import OptimizerConfig, build_operator, minimize_rate, minimize_rate_ball, rate_predictions
from .trail import EdgeOccupation, extract_trail_stock


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    _require(isinstance(data, dict), "config must be a JSON object")
    return data


def _apply_threads(requested: int | None) -> dict:
    import numba

    available = numba.config.NUMBA_NUM_THREADS
    if requested is None:
        return {"requested": None, "effective": available}
    _require(requested >= 1, f"--threads must be >= 1, got {requested}")
    effective = min(requested, available)
    numba.set_num_threads(effective)
    return {"requested": requested, "effective": effective}


def _prepare_outputs(out_dir: Path, names: list[str], force: bool) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / n for n in names]
    for p in paths:
        if p.exists() and not force:
            raise ConfigError(f"refusing to overwrite {p}; pass --force")
    return paths


def _versions() -> dict:
    import numba
    import pyamg
    import scipy

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "pyamg": pyamg.__version__,
        "walklab": __version__,
    }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, threads: dict, t0: float, outputs: list[Path]) -> None:
    manifest = {
        "schema": "manifest/1",
        "command": command,
        "config": config,
        "threads": threads,
        "versions": _versions(),
        "wall_time_s": time.monotonic() - t0,
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
    }
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _parse_sites(data: dict, key: str, dim: int):
    raw = data.get(key)
    _require(isinstance(raw, list) and raw, f"field '{key}' must be a nonempty list of sites")
    sites = []
    for j, z in enumerate(raw):
        _require(
            isinstance(z, list) and len(z) == dim and all(isinstance(c, int) for c in z),
            f"field '{key}[{j}]' must be a list of {dim} integers",
        )
        sites.append(tuple(z))
    return sites


def _load_or_build_oracle(data: dict, dim: int) -> GreenOracle:
    if "oracle_path" in data:
        p = Path(data["oracle_path"])
        _require(p.exists(), f"field 'oracle_path': file not found: {p}")
        oracle = GreenOracle.load(p)
        _require(oracle.dim == dim, f"field 'oracle_path': oracle dim {oracle.dim} does not match dim {dim}")
        return oracle
    box = _as_int(data, "oracle_box_radius", lo=4, default=20)
    return green_box_solve(dim, box)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_green(data: dict, seed: int | None, out_dir: Path, force: bool) -> list[Path]:
    dim = _as_int(data, "dim", lo=3, hi=5, default=5)
    box_radius = _as_int(data, "box_radius", lo=4)
    tolerance = _as_float(data, "tolerance", lo=1e-15, default=1e-12)
    names = ["green_oracle.npz"]
    sites = None
    if "sites" in data:
        sites = _parse_sites(data, "sites", dim)
        names.append("green_values.csv")
    paths = _prepare_outputs(out_dir, names, force)
    oracle = green_box_solve(dim, box_radius, tolerance)
    oracle.save(paths[0])
    if sites is not None:
        vals = oracle.values_at(np.asarray(sites, dtype=np.int64))
        rows = [[" ".join(map(str, z)), float(v)] for z, v in zip(sites, vals)]
        _write_csv(paths[1], "green-values", ["site", "value"], rows)
    return paths


def _cmd_capacity(data: dict, seed: int | None, out_dir: Path, force: bool) -> list[Path]:
    dim = _as_int(data, "dim", lo=3, hi=5, default=5)
    seed = seed if seed is not None else _as_int(data, "seed", lo=0, default=0)
    replicas = _as_int(data, "replicas", lo=100, default=20_000)
    stop_radius = _as_int(data, "stop_radius", lo=4, default=30)
    if "sites" in data:
        families = [_parse_sites(data, "sites", dim)]
    else:
        rand = data.get("random")
        _require(isinstance(rand, dict), "either 'sites' or 'random' must be given")
        size = _as_int(rand, "size", lo=1)
        count = _as_int(rand, "count", lo=1)
        families = [random_connected_set(dim, size, seed, stream_id=j) for j in range(count)]
    (path,) = _prepare_outputs(out_dir, ["capacity.csv"], force)
    oracle = _load_or_build_oracle(data, dim)
    rows = []
    for j, sites in enumerate(families):
        mc = capacity_mc(sites, replicas, stop_radius, seed=seed, oracle=oracle, first_stream=j * len(sites) * replicas)
        eq = equilibrium_solve(sites, oracle)
        var = variational_lower_bound(sites, oracle)
        rows.append([j, len(sites), "Escape-MC", float(mc.capacity), float(mc.error), float(mc.bias_bound)])
        rows.append([j, len(sites), "Equilibrium-Solve", float(eq.capacity), float(eq.error), ""])
        rows.append([j, len(sites), "VariationalBound", float(var.capacity), "", ""])
    _write_csv(path, "capacity", ["set", "size", "method", "value", "error", "bias_bound"], rows)
    return [path]


def _cmd_moments(data: dict, seed: int | None, out_dir: Path, force: bool) -> list[Path]:
    dim = _as_int(data, "dim", lo=3, hi=5, default=5)
    seed = seed if seed is not None else _as_int(data, "seed", lo=0, default=0)
    q = _as_float(data, "q", lo=1.0, hi=2.0, default=2.0)
    n_max = _as_int(data, "n_max", lo=1, hi=4, default=3)
    pairs = _as_int(data, "pairs", lo=100, default=100_000)
    stop_radius = _as_int(data, "stop_radius", lo=4, hi=2000, default=25)
    (path,) = _prepare_outputs(out_dir, ["moment_envelope.csv"], force)
    oracle = _load_or_build_oracle(data, dim)
    env = moment_bound_constant(q, dim, n_max, oracle, pairs=pairs, stop_radius=stop_radius, seed=seed)
    rows = [[r.order, float(r.estimate), float(r.se), float(r.envelope)] for r in env.rows]
    rows.append(["c_hat", float(env.c_hat), "", ""])
    _write_csv(path, "moment-envelope", ["order", "estimate", "se", "envelope"], rows)
    return [path]


def _cmd_trail_check(data: dict, seed: int | None, out_dir: Path, force: bool) -> list[Path]:
    dim = _as_int(data, "dim", lo=1, hi=5, default=2)
    seed = seed if seed is not None else _as_int(data, "seed", lo=0, default=0)
    rand = data.get("random")
    _require(isinstance(rand, dict), "field 'random' (with 'size' and 'count') is required")
    size = _as_int(rand, "size", lo=2, hi=16)
    count = _as_int(rand, "count", lo=1)
    sequences = _as_int(data, "sequences_per_set", lo=1, default=50)
    (path,) = _prepare_outputs(out_dir, ["trail_check.csv"], force)

    from .capacity import dense_lookup
    from . import _kernels

    rows = []
    violations = 0
    for set_id in range(count):
        sites = [tuple(map(int, z)) for z in random_connected_set(dim, size, seed, stream_id=set_id)]
        arr = np.asarray(sites, dtype=np.int64)
        lookup, lo_, hi_, strides = dense_lookup(arr)
        reps = 1200
        counts = np.zeros((size, size), dtype=np.int64)
        for s in range(size):
            res = _kernels.first_entry(
                dim, seed, (set_id * size + s) * reps, arr[s], reps,
                np.int64(60 * 60), lookup, lo_, hi_, strides, 400_000,
            )
            for b in range(size):
                counts[s, b] = int((res == b).sum())
        rowsum = counts.sum(axis=1)
        if (rowsum == 0).any():
            raise NumericError("isolated site: no observed entries from some site of the set")
        qmat = counts / rowsum[:, None]
        rng = np.random.default_rng(seed * 100_003 + set_id)
        for sq in range(sequences):
            cur = 0
            seq = [cur]
            seen = 1
            full = (1 << size) - 1
            for _ in range(64 * size):
                if seen == full:
                    break
                cur = int(rng.choice(size, p=qmat[cur]))
                seq.append(cur)
                seen |= 1 << cur
            if seen != full:
                continue
            occ = EdgeOccupation.from_visits([sites[i] for i in seq], sites=sites)
            ts = extract_trail_stock(sites, occ)
            if not ts.holds:
                violations += 1
            rows.append([set_id, sq, int(ts.holds), float(ts.certificate_lhs), float(ts.certificate_rhs)])
    _write_csv(path, "trail-check", ["set", "sequence", "holds", "lhs", "rhs"], rows)
    if violations:
        raise NumericError(f"trail certificate violated on {violations} sampled occupations")
    return [path]


def _cmd_rate(data: dict, seed: int | None, out_dir: Path, force: bool) -> list[Path]:
    dim = _as_int(data, "dim", lo=3, hi=5, default=5)
    opt = data.get("optimizer", {})
    _require(isinstance(opt, dict), "field 'optimizer' must be an object")
    cfg = OptimizerConfig(
        seed=seed if seed is not None else _as_int(opt, "seed", lo=0, default=0),
        restarts=_as_int(opt, "restarts", lo=0, default=2),
        sweeps=_as_int(opt, "sweeps", lo=1, default=40),
    )
    names = ["rate_result.json", "rate_predictions.csv"]
    paths = _prepare_outputs(out_dir, names, force)
    oracle = _load_or_build_oracle(data, dim)
    if "radius" in data:
        radius = _as_float(data, "radius", lo=0.0)
        result = minimize_rate_ball(dim, radius, oracle, cfg)
    else:
        sites = _parse_sites(data, "sites", dim)
        result = minimize_rate(sites, oracle, cfg)
    feasibility = build_operator(result.argmin_profile, oracle).norm
    payload = result.to_json_dict()
    payload["feasibility"] = feasibility
    _dump_json(paths[0], payload)
    xi_grid = data.get("xi_grid", [1.0, 2.0, 4.0])
    _require(
        isinstance(xi_grid, list)
        and xi_grid
        and all(isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in xi_grid),
        "field 'xi_grid' must be a nonempty list of positive numbers",
    )
    preds = rate_predictions(result, xi_grid)
    rows = [[r["xi"], r["self_intersection_slope"], r["intersection_slope"], r["label"]] for r in preds]
    _write_csv(paths[1], "rate-predictions", ["xi", "self_intersection_slope", "intersection_slope", "label"], rows)
    return paths


def _cmd_simulate(data: dict, seed: int | None, out_dir: Path, force: bool) -> list[Path]:
    dim = _as_int(data, "dim", lo=3, hi=5, default=5)
    seed = seed if seed is not None else _as_int(data, "seed", lo=0, default=0)
    replicas = _as_int(data, "replicas", lo=1, default=200)
    stop_radius = _as_int(data, "stop_radius", lo=1, default=25)
    (path,) = _prepare_outputs(out_dir, ["simulate.csv"], force)
    origin = (0,) * dim
    rows = []
    for rep in range(replicas):
        field = simulate_local_times(dim, seed, TruncatedInfinite(stop_radius), replica=rep)
        rows.append(
            [
                rep,
                field.steps,
                len(field.counts),
                field.counts.get(origin, 0),
                float(math.sqrt(sum(c * c for c in field.end_position))),
            ]
        )
    _write_csv(path, "simulate", ["replica", "steps", "distinct_sites", "origin_visits", "end_norm"], rows)
    return [path]


def _cmd_experiment(config_path, seed: int | None, out_dir: Path, force: bool) -> tuple[list[Path], dict]:
    _require(config_path is not None, "experiment requires --config <path.json>")
    config = load_config(config_path)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    stem = config.out or config.kind
    names = [f"{stem}.csv", f"{stem}.summary.json"]
    if config.kind == "range-intersection":
        names.append(f"{stem}.json")  # tail-fit sidecar written by the runner
    paths = _prepare_outputs(out_dir, names, force)
    runner = {
        "intersection-decomposition": run_intersection_decomposition,
        "level-set-geometry": run_level_set_geometry,
        "range-intersection": run_range_intersection,
    }[config.kind]
    summary = runner(config, paths[0])
    _dump_json(paths[1], summary)
    return paths, config.to_json_dict()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="walklab", description="Transient walk intersection toolkit")
    parser.add_argument("command", choices=["green", "capacity", "moments", "trail-check", "rate", "simulate", "experiment"])
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=None, help="numba thread count (clamped to available)")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    args = parser.parse_args(argv)

    t0 = time.monotonic()
    try:
        threads = _apply_threads(args.threads)
        out_dir = Path(args.out)
        if args.command == "experiment":
            outputs, config_echo = _cmd_experiment(args.config, args.seed, out_dir, args.force)
        else:
            config_echo = _read_config(args.config)
            if args.seed is not None:
                config_echo = {**config_echo, "seed": args.seed}
            handler = {
                "green": _cmd_green,
                "capacity": _cmd_capacity,
                "moments": _cmd_moments,
                "trail-check": _cmd_trail_check,
                "rate": _cmd_rate,
                "simulate": _cmd_simulate,
            }[args.command]
            outputs = handler(config_echo, args.seed, out_dir, args.force)
        _write_manifest(out_dir, args.command, config_echo, threads, t0, outputs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def cli_dispatch(argv) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
