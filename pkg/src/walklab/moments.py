"""Intersection functionals of two walks and their moment machinery.

The central object is the interpolated overlap sum_z l(z) * lt(z)^(q-1) of
two local-time fields. Its moments admit closed combinatorial bounds built
from permutation sums of Green values, whose finiteness reduces to a lattice
power series; both the bounds and the series live here, together with a
stretched-exponential tail fitter for simulated overlap samples.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.special import gamma as _gamma

from . import _kernels
from .errors import NumericError
from .green import GreenOracle, _binomial_table
from .lattice import LocalTimeField

DEFAULT_EXPONENT_GRID = tuple(round(0.30 + 0.05 * i, 2) for i in range(11))  # 0.30 .. 0.80


def validity_window(dim: int) -> tuple[float, float]:
    """Open-below interval of overlap exponents with finite moment bounds."""
    if dim <= 2:
        raise NumericError("recurrent dimension: overlap moments need dim >= 3")
    return (dim / (dim - 2.0), 2.0)


@dataclass(frozen=True)
class InterpolatedIntersection:
    q: float
    value: float
    fields_used: tuple[LocalTimeField, LocalTimeField]
    in_validity_window: bool


def zeta(field: LocalTimeField, field_tilde: LocalTimeField, q: float) -> InterpolatedIntersection:
    """sum over common support of l(z) * lt(z)^(q-1).

    Exponents outside the validity window are computed anyway (they are the
    interesting divergent diagnostics) but warned about.
    """
    if field.dim != field_tilde.dim:
        raise ValueError("fields live in different dimensions")
    lo, hi = validity_window(field.dim)
    in_window = lo < q <= hi
    if not in_window:
        warnings.warn(
            f"overlap exponent q={q} outside ({lo:.4g}, {hi}]: moment bounds do not apply",
            RuntimeWarning,
            stacklevel=2,
        )
    a, b = field.counts, field_tilde.counts
    # iterate the smaller support; the first field always carries power 1
    common = (z for z in b if z in a) if len(b) < len(a) else (z for z in a if z in b)
    if q == 2.0:
        total = float(sum(a[z] * b[z] for z in common))
    else:
        total = sum(a[z] * float(b[z]) ** (q - 1.0) for z in common)
    return InterpolatedIntersection(q=q, value=float(total), fields_used=(field, field_tilde), in_validity_window=in_window)


def permutation_moment_bound(sites, oracle: GreenOracle) -> float:
    """Upper bound on E[prod_i l(z_i)]: sum over all orderings of the sites
    of the product of consecutive Green values, starting at the origin.

    Evaluated by dynamic programming over (visited subset, last site), which
    sums exactly the same n! ordering terms as direct enumeration.
    """
    pts = [tuple(int(c) for c in z) for z in sites]
    n = len(pts)
    if n == 0:
        raise ValueError("need at least one site")
    if n > 10:
        raise ValueError("factorial ordering sum is capped at 10 sites")
    full = [(0,) * oracle.dim] + pts
    g = oracle.green_matrix(np.asarray(full, dtype=np.int64))

    # best[(mask, last)] = sum over orderings of `mask` ending at `last`
    acc = {(1 << i, i): g[0, i + 1] for i in range(n)}
    for mask in range(1, 1 << n):
        for last in range(n):
            val = acc.get((mask, last))
            if val is None:
                continue
            for nxt in range(n):
                bit = 1 << nxt
                if mask & bit:
                    continue
                key = (mask | bit, nxt)
                acc[key] = acc.get(key, 0.0) + val * g[last + 1, nxt + 1]
    fullmask = (1 << n) - 1
    return float(sum(acc[(fullmask, last)] for last in range(n)))


@dataclass(frozen=True)
class HolderSeries:
    """Partial sum of (1 + |z|)^(q(2-d)) over the ball |z| <= radius."""

    q: float
    dim: int
    radius: int
    partial_sum: float
    shell_values: tuple[float, ...]  # increment from sites with floor(|z|) = k
    shell_counts: tuple[int, ...]
    convergent: bool

    def analytic_tail_bound(self) -> float:
        """Integral-test bound on the sum over |z| > radius.

        Each unit cube around a site z beyond the ball lies within |x| >=
        |z| - sqrt(d)/2, so the lattice tail is at most the integral of
        (1 + r - sqrt(d)/2)^(q(2-d)) r^(d-1) over r > radius - sqrt(d)/2
        times the unit-sphere surface measure. Infinite when divergent.
        """
        if not self.convergent:
            return float("inf")
        d = self.dim
        a = self.q * (d - 2.0)
        half_diag = math.sqrt(d) / 2.0
        surface = 2.0 * math.pi ** (d / 2.0) / _gamma(d / 2.0)
        lo = self.radius - half_diag
        if lo <= 0:
            raise ValueError("radius too small for the cube-comparison bound")
        val, _ = quad(lambda r: (1.0 + r - half_diag) ** (-a) * r ** (d - 1.0), lo, np.inf)
        return float(surface * val)


def holder_series(q: float, dim: int, radius: int) -> HolderSeries:
    """Evaluate the decay series by orbit-weighted fundamental-domain sums."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    n_reps = math.comb(radius + dim, dim)
    orbit, normsq = _kernels.reduced_orbit_normsq(dim, radius, n_reps)
    r = np.sqrt(normsq.astype(np.float64))
    keep = r <= radius
    vals = orbit[keep] * (1.0 + r[keep]) ** (q * (2.0 - dim))
    shell = np.floor(r[keep]).astype(np.int64)
    shell_values = np.zeros(radius + 1)
    shell_counts = np.zeros(radius + 1, np.int64)
    np.add.at(shell_values, shell, vals)
    np.add.at(shell_counts, shell, orbit[keep].astype(np.int64))
    return HolderSeries(
        q=q,
        dim=dim,
        radius=radius,
        partial_sum=float(vals.sum()),
        shell_values=tuple(float(v) for v in shell_values),
        shell_counts=tuple(int(c) for c in shell_counts),
        convergent=bool(q * (dim - 2.0) > dim),
    )


def overlap_truncation_bias(stop_radius: int, oracle: GreenOracle) -> float:
    """Certified bound on how far truncation depresses the mean overlap.

    The mean quadratic overlap of two infinite walks is the summed square of
    the Green function; stopping both walks at the truncation sphere loses,
    at each site, at most the expected visits after the stopping time, which
    the radial envelope bounds by the distance from the site to the sphere.
    Summed: 2 * Ghat(z) * min(Ghat(z), env(stop_radius - |z|)) over the
    oracle box (orbit-weighted) plus an integral tail beyond the box, where
    Ghat is the envelope bound on the Green function itself.
    """
    if stop_radius < 4:
        raise ValueError("stop_radius must be >= 4")
    if oracle.box_radius < stop_radius:
        raise NumericError(
            f"oracle box too small: bias certificate at stop_radius {stop_radius} "
            f"needs box_radius >= {stop_radius}"
        )
    d = oracle.dim
    n_reps = math.comb(oracle.box_radius + d, d)
    orbit, normsq = _kernels.reduced_orbit_normsq(d, oracle.box_radius, n_reps)
    r = np.sqrt(normsq.astype(np.float64))

    g0 = oracle.origin_value
    env = np.vectorize(oracle.radial_envelope)
    g_hat = np.full_like(r, g0)
    far = r >= 1.0
    g_hat[far] = np.minimum(g0, env(r[far]))
    delta = g_hat.copy()
    inside = r <= stop_radius - 1.0
    delta[inside] = np.minimum(delta[inside], env(stop_radius - r[inside]))
    total = float((orbit * 2.0 * g_hat * delta).sum())

    # beyond the tabled box both factors fall under the power envelope;
    # cube-comparison shift of half a diagonal keeps the integral a bound
    c = oracle.asymptotic_constant
    surface = 2.0 * math.pi ** (d / 2.0) / _gamma(d / 2.0)
    shift = math.sqrt(d) / 2.0
    box = float(oracle.box_radius)
    tail, _ = quad(
        lambda s: 2.0 * (c * (s - shift) ** (2.0 - d)) ** 2 * s ** (d - 1.0), box - shift, np.inf
    )
    return total + surface * tail


def sample_overlaps(
    dim: int,
    q: float,
    pairs: int,
    stop_radius: int,
    *,
    seed: int = 0,
    first_stream: int = 0,
    chunks: int = 64,
    max_steps: int | None = None,
):
    """Plain-MC samples of the overlap functionals of independent walk pairs.

    Returns (quadratic overlaps int64, interpolated overlaps float64, flags).
    """
    if dim <= 2:
        raise NumericError("recurrent dimension: infinite-horizon overlaps need dim >= 3")
    if dim > 5 or stop_radius > 2000:
        raise ValueError("pair kernels pack coordinates 12 bits per axis: dim <= 5, radius <= 2000")
    if max_steps is None:
        max_steps = 2000 * stop_radius**2 + 1000
    table_bits = max(10, math.ceil(math.log2(8.0 * (1.2 * stop_radius**2 + 64))))
    dummy_g = np.zeros(1)
    dummy_b = np.zeros((1, 1), np.int64)
    z2, zq, _, _, _, _, flags = _kernels.pair_intersections(
        dim, seed, first_stream, pairs, stop_radius**2, q, 0.0, 0, 0, max_steps,
        dummy_g, dummy_b, 0, 0.0, table_bits, np.empty(0, np.int64), min(chunks, pairs),
    )
    if flags.any():
        raise NumericError("nonterminating truncation: flagged replicas in plain overlap sampling")
    return z2, zq


@dataclass(frozen=True)
class MomentRow:
    order: int
    estimate: float
    se: float
    envelope: float


@dataclass(frozen=True)
class MomentEnvelope:
    q: float
    c_hat: float
    rows: tuple[MomentRow, ...]


def moment_bound_constant(
    q: float,
    dim: int,
    n_max: int,
    green_oracle: GreenOracle | None = None,
    *,
    pairs: int = 200_000,
    stop_radius: int = 25,
    seed: int = 0,
) -> MomentEnvelope:
    """MC moments of the interpolated overlap against their factorial envelope.

    Returns per-order estimates with standard errors and the smallest
    constant whose envelope c^n * (n!)^q dominates every estimated moment.
    """
    if n_max > 4:
        raise ValueError("MC moments beyond order 4 are too noisy to certify")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    _, zq = sample_overlaps(dim, q, pairs, stop_radius, seed=seed)
    x = zq.astype(np.float64)
    rows = []
    c_hat = 0.0
    for n in range(1, n_max + 1):
        xn = x**n
        est = float(xn.mean())
        se = float(xn.std(ddof=1) / math.sqrt(len(xn)))
        c_n = (est / math.factorial(n) ** q) ** (1.0 / n)
        c_hat = max(c_hat, c_n)
        rows.append((n, est, se))
    out = tuple(
        MomentRow(order=n, estimate=est, se=se, envelope=c_hat**n * math.factorial(n) ** q)
        for n, est, se in rows
    )
    return MomentEnvelope(q=q, c_hat=float(c_hat), rows=out)


@dataclass(frozen=True)
class TailEstimate:
    """Empirical survival table with a stretched-exponential fit.

    The fit regresses log survival on t^alpha over a fixed exponent grid
    (with an intercept, so the estimated decay rate absorbs no prefactor)
    and keeps the exponent with the best coefficient of determination.
    """

    thresholds: tuple[float, ...]
    survival: tuple[float, ...]
    se: tuple[float, ...]
    exceedances: tuple[int, ...]
    n_samples: int
    kappa_hat: float
    alpha_hat: float
    r_squared: float
    intercept: float

    def save(self, csv_path) -> None:
        path = Path(csv_path)
        with open(path, "w", newline="") as fh:
            fh.write("# schema=tail-estimate/1\n")
            writer = csv.writer(fh)
            writer.writerow(["threshold", "survival", "se", "n_samples"])
            for t, s, e in zip(self.thresholds, self.survival, self.se):
                writer.writerow([f"{t:.10g}", f"{s:.10g}", f"{e:.10g}", self.n_samples])
        sidecar = path.with_suffix(".json")
        sidecar.write_text(
            json.dumps(
                {
                    "schema": "tail-estimate-fit/1",
                    "kappa_hat": self.kappa_hat,
                    "alpha_hat": self.alpha_hat,
                    "r_squared": self.r_squared,
                    "intercept": self.intercept,
                    "n_samples": self.n_samples,
                },
                indent=2,
            )
            + "\n"
        )


def tail_fit(
    samples,
    exponent_grid=DEFAULT_EXPONENT_GRID,
    *,
    weights=None,
    thresholds=None,
    min_exceedances: int = 10,
) -> TailEstimate:
    """Fit log P(X > t) ~ intercept - kappa * t^alpha over an exponent grid.

    Thresholds default to a geometric grid between the sample median and the
    largest t still backed by ``min_exceedances`` raw exceedances. Weighted
    samples (importance sampling) estimate survival by normalized weight
    sums; exceedance counts stay raw, so resolution limits are honest.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or len(x) < 100:
        raise ValueError("need a flat array of at least 100 samples")
    if weights is None:
        w = np.ones_like(x)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape or (w < 0).any():
            raise ValueError("weights must be nonnegative and match samples")
    n = len(x)

    order = np.argsort(x)
    xs, ws = x[order], w[order]

    if thresholds is None:
        lo = float(np.median(x))
        hi = float(xs[n - min_exceedances]) if n > min_exceedances else float(xs[-1])
        if not (hi > lo > 0):
            raise NumericError("insufficient tail resolution: no spread above the median")
        thresholds = np.geomspace(lo, hi, 12)
    t_grid = np.asarray(thresholds, dtype=np.float64)

    total_w = ws.sum()
    surv, ses, counts, kept = [], [], [], []
    for t in t_grid:
        i = np.searchsorted(xs, t, side="right")
        count = n - i
        if count < min_exceedances:
            continue
        p = float(ws[i:].sum() / total_w)
        if not 0.0 < p < 1.0:
            continue
        # delta-method variance of the normalized weight ratio; reduces to
        # binomial p(1-p)/n for unit weights
        dev = ws * (-p)
        dev[i:] += ws[i:]
        var = float((dev**2).sum()) / total_w**2
        surv.append(p)
        ses.append(math.sqrt(var))
        counts.append(int(count))
        kept.append(float(t))

    if len(kept) < 5:
        raise NumericError(f"insufficient tail resolution: {len(kept)} usable thresholds, need 5")

    r2, alpha_hat, kappa_hat, intercept = _grid_fit(np.asarray(kept), np.log(np.asarray(surv)), exponent_grid)

    return TailEstimate(
        thresholds=tuple(kept),
        survival=tuple(surv),
        se=tuple(ses),
        exceedances=tuple(counts),
        n_samples=n,
        kappa_hat=kappa_hat,
        alpha_hat=alpha_hat,
        r_squared=r2,
        intercept=intercept,
    )


def _grid_fit(t_arr: np.ndarray, logp: np.ndarray, exponent_grid) -> tuple[float, float, float, float]:
    best = None
    for alpha in exponent_grid:
        design = t_arr**alpha
        slope, intercept = np.polyfit(design, logp, 1)
        pred = slope * design + intercept
        ss_res = float(((logp - pred) ** 2).sum())
        ss_tot = float(((logp - logp.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
        if best is None or r2 > best[0]:
            best = (r2, float(alpha), float(-slope), float(intercept))
    return best


def ladder_tail_fit(
    levels,
    thresholds,
    exponent_grid=DEFAULT_EXPONENT_GRID,
    *,
    min_exceedances: int = 30,
    anchor_exceedances: int = 500,
) -> TailEstimate:
    """Tail fit over a ladder of progressively deeper weighted ensembles.

    A single importance-sampling proposal only resolves the survival curve
    over a narrow window around its own typical values; identifying a
    stretched exponent needs several decades. ``levels`` is a sequence of
    (samples, log_weights) pairs ordered shallow to deep. The first level
    anchors absolute survival; each later level contributes conditional
    ratios P(X > t) / P(X > anchor) above an anchor threshold that the
    previous level still resolved with at least ``anchor_exceedances`` raw
    exceedances. A threshold is kept only while backed by
    ``min_exceedances`` raw samples at the level estimating it, and the
    first (shallowest) level to resolve a threshold wins.
    """
    grid = np.unique(np.asarray(thresholds, dtype=np.float64))
    if grid.size < 5 or (grid <= 0).any():
        raise ValueError("need at least 5 positive thresholds")
    surv: dict[float, float] = {}
    counts: dict[float, int] = {}
    anchor, base = 0.0, 1.0
    for lev, (samples, log_weights) in enumerate(levels):
        x = np.asarray(samples, dtype=np.float64)
        lw = np.asarray(log_weights, dtype=np.float64)
        if x.shape != lw.shape or x.ndim != 1:
            raise ValueError("each level needs flat samples with matching log weights")
        w = np.exp(lw - lw.max())
        denom = float(w[x > anchor].sum())
        if denom <= 0.0:
            raise NumericError(f"splice anchor unreachable: level {lev} never exceeds {anchor:g}")
        level_resolved = []
        for t in grid[grid > anchor]:
            raw = int((x > t).sum())
            if raw < min_exceedances:
                break
            p = base * float(w[x > t].sum()) / denom
            if t not in surv:
                surv[t] = p
                counts[t] = raw
            if raw >= anchor_exceedances and t in surv:
                level_resolved.append(t)
        if level_resolved:
            anchor = max(level_resolved)
            base = surv[anchor]
    kept = sorted(t for t in surv if 0.0 < surv[t] < 1.0)
    if len(kept) < 5:
        raise NumericError(f"insufficient tail resolution: {len(kept)} usable thresholds, need 5")
    t_arr = np.asarray(kept)
    logp = np.log(np.asarray([surv[t] for t in kept]))
    r2, alpha_hat, kappa_hat, intercept = _grid_fit(t_arr, logp, exponent_grid)
    return TailEstimate(
        thresholds=tuple(kept),
        survival=tuple(surv[t] for t in kept),
        se=tuple(float("nan") for _ in kept),
        exceedances=tuple(counts[t] for t in kept),
        n_samples=sum(len(np.asarray(s)) for s, _ in levels),
        kappa_hat=kappa_hat,
        alpha_hat=alpha_hat,
        r_squared=r2,
        intercept=intercept,
    )
