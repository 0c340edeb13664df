"""Seeded experiment drivers behind the CLI.

Three batch experiments over pairs of independent walks, each with
optional return-biased importance sampling: the inside/outside
decomposition of the intersection local time against high-level sets,
the geometry (volume and capacity) of exact-level-set intersections, and
the tail of the range-intersection volume. Plus the single-walk
forced-return sampler those tilts are built on.

Outputs are plain CSV, first line "# schema=<kind>/1", written
single-threaded; every numeric column comes from an order-independent
per-replica array, so bytes do not depend on the thread count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .capacity import equilibrium_solve
from .config import ExperimentConfig
from .errors import NumericError
from .green import GreenOracle, green_box_solve
from .moments import tail_fit

ESS_FLOOR = 50.0


@dataclass(frozen=True)
class WeightedSample:
    """One importance-sampled observation: value, exact log-likelihood
    ratio of the plain walk law versus the sampling law, and flags."""

    value: float
    log_weight: float
    replica: int
    flagged: bool


def effective_sample_size(log_weights: np.ndarray) -> float:
    """Kish effective size of self-normalized weights, (sum w)^2 / sum w^2."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0:
        return 0.0
    w = np.exp(lw - lw.max())
    return float(w.sum() ** 2 / (w * w).sum())


def self_normalized_mean(values: np.ndarray, log_weights: np.ndarray) -> tuple[float, float]:
    """Weighted mean and its delta-method standard error."""
    x = np.asarray(values, dtype=np.float64)
    lw = np.asarray(log_weights, dtype=np.float64)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    mean = float(w @ x)
    var = float((w * w * (x - mean) ** 2).sum())
    return mean, math.sqrt(var)


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    v = np.asarray(values, dtype=np.float64)[order]
    w = np.asarray(weights, dtype=np.float64)[order]
    cum = np.cumsum(w)
    idx = int(np.searchsorted(cum, 0.5 * cum[-1]))
    return float(v[min(idx, len(v) - 1)])


def _table_bits(stop_radius: int) -> int:
    # sized so a walk's range fits the open-addressing table below 3/4 load
    return max(10, math.ceil(math.log2(8.0 * (1.2 * stop_radius**2 + 64))))


def _tilt_tables(oracle: GreenOracle | None, dim: int, theta: float, box_radius: int):
    """Green lookup tables for the tilted kernel; dummies when untilted."""
    if theta == 0.0:
        return (np.zeros(1), np.zeros((1, 1), np.int64), 0, 0.0, oracle)
    if oracle is None:
        oracle = green_box_solve(dim, box_radius)
    return (oracle.values_reduced, oracle._binom, oracle.box_radius, oracle.asymptotic_constant, oracle)


def _check_pack_limits(dim: int, stop_radius: int) -> None:
    if dim > 5 or stop_radius > 2000:
        raise ValueError("coordinate packing supports dim <= 5 and stop_radius <= 2000")


def forced_return_sampler(
    dim: int,
    return_target: int,
    seed: int,
    *,
    theta: float = 0.5,
    replicas: int = 2000,
    stop_radius: int = 25,
    oracle: GreenOracle | None = None,
    first_stream: int = 0,
    tilt_max_steps: int = 200_000,
    chunks: int = 64,
) -> list[WeightedSample]:
    """Sample origin local times under the return-biased harmonic tilt.

    Until the walk has made `return_target` returns to the origin, each
    step is drawn with neighbor weights G(y)^theta instead of uniformly;
    afterwards (or past the tilt step cap) stepping is plain. The log
    ratio of plain to tilted step probabilities is accumulated exactly,
    so self-normalized averages of any recorded observable are unbiased.
    theta = 0 reduces to plain sampling with unit weights.
    """
    if return_target < 1:
        raise ValueError("return_target must be >= 1")
    if not 0.0 <= theta < 1.0:
        raise ValueError("theta must lie in [0, 1)")
    _check_pack_limits(dim, stop_radius)
    gtable, binom, gbox, asym_c, _ = _tilt_tables(oracle, dim, theta, max(20, stop_radius // 2))
    visits, logw, flags = _kernels.tilted_origin_walks(
        dim,
        seed,
        first_stream,
        replicas,
        np.int64(stop_radius) ** 2,
        theta,
        return_target,
        tilt_max_steps,
        _guard_steps(stop_radius),
        gtable,
        binom,
        gbox,
        asym_c,
        _table_bits(stop_radius),
        min(chunks, replicas),
    )
    return [
        WeightedSample(value=float(v), log_weight=float(lw), replica=i, flagged=bool(fl))
        for i, (v, lw, fl) in enumerate(zip(visits, logw, flags))
    ]


def tilted_overlap_samples(
    dim: int,
    pairs: int,
    stop_radius: int,
    *,
    theta: float = 0.0,
    return_target: int = 0,
    seed: int = 0,
    oracle: GreenOracle | None = None,
    tilt_max_steps: int = 200_000,
    oracle_box_radius: int = 20,
):
    """Quadratic overlaps of walk pairs under the return-biased tilt.

    Both walks of a pair are tilted identically. Returns (overlaps int64,
    log_weights float64, flags uint8); the log weight is the sum of the two
    walks' exact plain-vs-tilted log ratios, so self-normalized tail
    estimates are unbiased. Flagged pairs hit a step guard and should be
    dropped by the caller. theta = 0 gives plain pairs with zero log weight.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    if not 0.0 <= theta < 1.0:
        raise ValueError("theta must lie in [0, 1)")
    if theta > 0.0 and return_target < 1:
        raise ValueError("return_target must be >= 1 when theta > 0")
    _check_pack_limits(dim, stop_radius)
    gtable, binom, gbox, asym_c, _ = _tilt_tables(oracle, dim, theta, oracle_box_radius)
    z2, _zq, _rint, _met, _inside, logw, flags = _kernels.pair_intersections(
        dim,
        seed,
        0,
        pairs,
        np.int64(stop_radius) ** 2,
        2.0,
        theta,
        return_target,
        tilt_max_steps,
        _guard_steps(stop_radius),
        gtable,
        binom,
        gbox,
        asym_c,
        _table_bits(stop_radius),
        np.empty(0, np.int64),
        min(64, pairs),
    )
    return z2, logw, flags


def _guard_steps(stop_radius: int) -> int:
    return 2000 * stop_radius * stop_radius + 1000


def _run_pairs(config: ExperimentConfig, oracle: GreenOracle | None, xis: np.ndarray):
    _check_pack_limits(config.dim, config.stop_radius)
    gtable, binom, gbox, asym_c, oracle = _tilt_tables(
        oracle, config.dim, config.theta, config.oracle_box_radius
    )
    out = _kernels.pair_intersections(
        config.dim,
        config.seed,
        0,
        config.pairs,
        np.int64(config.stop_radius) ** 2,
        2.0,
        config.theta,
        config.return_target,
        config.tilt_max_steps,
        _guard_steps(config.stop_radius),
        gtable,
        binom,
        gbox,
        asym_c,
        _table_bits(config.stop_radius),
        xis,
        min(64, config.pairs),
    )
    return out, oracle


def _gate_ess(logw: np.ndarray, included: np.ndarray) -> float:
    ess = effective_sample_size(logw[included])
    if ess < ESS_FLOOR:
        raise NumericError(f"effective sample size too small: {ess:.1f} < {ESS_FLOOR:.0f}")
    return ess


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, schema: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema}/1\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def run_intersection_decomposition(
    config: ExperimentConfig, out_path, *, oracle: GreenOracle | None = None
) -> dict:
    """Split each pair's intersection local time into the part carried by
    sites where both local times reach sqrt(t)/A, for each A on the grid,
    conditioned (by weighting) on the intersection exceeding t.

    Writes one CSV row per pair; returns the aggregated per-A summary.
    """
    if config.kind != "intersection-decomposition":
        raise ValueError(f"config kind {config.kind!r} does not match this experiment")
    labels = ["inf" if math.isinf(a) else _fmt(float(a)) for a in config.a_grid]
    xis = np.array(
        [0 if math.isinf(a) else max(1, math.ceil(math.sqrt(config.t) / a)) for a in config.a_grid],
        dtype=np.int64,
    )
    (zeta2, _zetaq, _rint, _met, inside, logw, flags), _ = _run_pairs(config, oracle, xis)

    included = flags == 0
    ess = _gate_ess(logw, included)
    exceeds = zeta2 > config.t

    header = ["pair", "zeta2", "log_weight", "flagged", "exceeds_t"]
    for lab in labels:
        header += [f"inside_a_{lab}", f"outside_frac_a_{lab}"]
    rows = []
    for i in range(config.pairs):
        row = [i, int(zeta2[i]), float(logw[i]), int(flags[i]), int(exceeds[i])]
        for j in range(len(labels)):
            ins = int(inside[i, j])
            frac = (int(zeta2[i]) - ins) / int(zeta2[i]) if zeta2[i] > 0 else ""
            row += [ins, frac]
        rows.append(row)
    _write_csv(Path(out_path), "intersection-decomposition", header, rows)

    cond = included & exceeds
    aggregates = []
    for j, lab in enumerate(labels):
        if cond.any():
            w = np.exp(logw[cond] - logw[cond].max())
            fr = (zeta2[cond] - inside[cond, j]) / zeta2[cond]
            med = weighted_median(fr, w)
        else:
            med = None
        aggregates.append({"a": lab, "weighted_median_outside_frac": med})
    return {
        "kind": config.kind,
        "ess": ess,
        "pairs": config.pairs,
        "excluded": int((~included).sum()),
        "conditioned_pairs": int(cond.sum()),
        "aggregates": aggregates,
    }


def run_level_set_geometry(
    config: ExperimentConfig, out_path, *, oracle: GreenOracle | None = None
) -> dict:
    """Per pair: the volume of the exact-level-set intersection
    {l = n} with {l~ = m}, and its capacity whenever the volume reaches
    vol_min. Summarizes the conditional capacity distribution against the
    threshold vol_min^(1 - 2/d + epsilon)."""
    if config.kind != "level-set-geometry":
        raise ValueError(f"config kind {config.kind!r} does not match this experiment")
    _check_pack_limits(config.dim, config.stop_radius)
    gtable, binom, gbox, asym_c, oracle = _tilt_tables(
        oracle, config.dim, config.theta, config.oracle_box_radius
    )
    if oracle is None:
        oracle = green_box_solve(config.dim, config.oracle_box_radius)
    site_cap = 512
    vol, logw, flags, site_counts, sites = _kernels.pair_level_sets(
        config.dim,
        config.seed,
        0,
        config.pairs,
        np.int64(config.stop_radius) ** 2,
        config.level_n,
        config.level_m,
        config.vol_min,
        config.theta,
        config.return_target,
        config.tilt_max_steps,
        _guard_steps(config.stop_radius),
        gtable,
        binom,
        gbox,
        asym_c,
        _table_bits(config.stop_radius),
        site_cap,
        min(64, config.pairs),
    )

    included = flags == 0
    ess = _gate_ess(logw, included)

    capacities = np.full(config.pairs, np.nan)
    capacity_errors = 0
    for i in range(config.pairs):
        if site_counts[i] > 0 and included[i]:
            pts = sites[i, : site_counts[i]].astype(np.int64)
            try:
                capacities[i] = equilibrium_solve(pts, oracle).capacity
            except NumericError:
                capacity_errors += 1

    header = ["pair", "volume", "log_weight", "flagged", "capacity"]
    rows = []
    for i in range(config.pairs):
        cap = "" if math.isnan(capacities[i]) else float(capacities[i])
        rows.append([i, int(vol[i]), float(logw[i]), int(flags[i]), cap])
    _write_csv(Path(out_path), "level-set-geometry", header, rows)

    threshold = config.vol_min ** (1.0 - 2.0 / config.dim + config.epsilon)
    have = included & ~np.isnan(capacities)
    summary: dict = {
        "kind": config.kind,
        "ess": ess,
        "pairs": config.pairs,
        "excluded": int((~included).sum()),
        "conditioned_pairs": int(have.sum()),
        "capacity_errors": capacity_errors,
        "threshold": threshold,
    }
    if have.any():
        w = np.exp(logw[have] - logw[have].max())
        w /= w.sum()
        caps = capacities[have]
        hist_edges = np.linspace(0.0, float(caps.max()), 13)
        hist, _ = np.histogram(caps, bins=hist_edges, weights=w)
        summary.update(
            median_capacity=weighted_median(caps, w),
            frac_below_threshold=float(w[caps <= threshold].sum()),
            histogram={"edges": [float(e) for e in hist_edges], "mass": [float(h) for h in hist]},
        )
    else:
        summary.update(median_capacity=None, frac_below_threshold=None, histogram=None)
    return summary


def run_range_intersection(
    config: ExperimentConfig, out_path, *, oracle: GreenOracle | None = None
) -> dict:
    """Tail of the number of distinct sites both walks visit, with a
    stretched-exponential fit, reported against the exponent window
    (1 - 2/d) +- epsilon."""
    if config.kind != "range-intersection":
        raise ValueError(f"config kind {config.kind!r} does not match this experiment")
    (zeta2, _zetaq, rint, met, _inside, logw, flags), _ = _run_pairs(
        config, oracle, np.empty(0, np.int64)
    )

    # two independently maintained meet detectors must agree exactly
    if not np.array_equal(rint >= 1, met == 1):
        raise NumericError("meet detectors disagree: range counter vs met flag")

    included = flags == 0
    ess = _gate_ess(logw, included)

    xs = rint[included].astype(np.float64)
    w = np.exp(logw[included] - logw[included].max())
    pos = np.sort(xs[xs > 0])
    if pos.size < 20:
        raise NumericError(f"insufficient tail resolution: {pos.size} positive volumes")
    t_lo = max(1.0, float(pos[pos.size // 2]))
    t_hi = float(pos[-10]) if pos.size > 10 else float(pos[-1])
    if t_hi <= t_lo:
        t_hi = t_lo + 1.0
    thresholds = np.unique(np.round(np.geomspace(t_lo, t_hi, 12)))
    estimate = tail_fit(xs, weights=w, thresholds=thresholds, min_exceedances=config.min_exceedances)
    estimate.save(out_path)

    target = 1.0 - 2.0 / config.dim
    window = (target - config.epsilon, target + config.epsilon)
    p_meet_direct = float(np.average(met[included], weights=w))
    p_vol_ge_1 = float(np.average(rint[included] >= 1, weights=w))
    return {
        "kind": config.kind,
        "ess": ess,
        "pairs": config.pairs,
        "excluded": int((~included).sum()),
        "alpha_hat": estimate.alpha_hat,
        "kappa_hat": estimate.kappa_hat,
        "r_squared": estimate.r_squared,
        "exponent_window": list(window),
        "alpha_in_window": bool(window[0] <= estimate.alpha_hat <= window[1]),
        "p_meet_direct": p_meet_direct,
        "p_volume_ge_1": p_vol_ge_1,
    }
