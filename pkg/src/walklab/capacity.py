"""Capacity of finite sets, three ways.

A finite set traps a walk if the walk ever returns to it at positive time;
the capacity adds up the per-site probabilities of never doing so. The
module estimates that sum directly by Monte Carlo, computes it exactly (up
to oracle accuracy) from the equilibrium linear system on the set's Green
matrix, and lower-bounds it with the uniform test measure, which also yields
an empirical constant for the |set|^(1-2/d) growth law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NumericError
from .green import GreenOracle
from .lattice import truncation_bias_bound

_METHODS = ("Escape-MC", "Equilibrium-Solve", "VariationalBound")


@dataclass(frozen=True)
class EquilibriumSolution:
    """A capacity value with the measure that produced it.

    ``error`` is a standard error for Escape-MC and a linear-system residual
    for Equilibrium-Solve. ``bias_bound`` (Escape-MC only) bounds the upward
    bias from counting walks that outrun the truncation ball as escaped.
    Negative equilibrium weights are reported as-is; they flag an oracle
    whose accuracy is too low for the requested set.
    """

    sites: tuple[tuple[int, ...], ...]
    measure: tuple[float, ...]
    capacity: float
    method: str
    error: float
    bias_bound: float | None = None
    has_negative_weights: bool = False
    kappa_hat: float | None = None

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def _as_site_array(sites) -> np.ndarray:
    arr = np.asarray([tuple(int(c) for c in z) for z in sites], dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a nonempty list of lattice sites")
    return arr


def dense_lookup(sites: np.ndarray):
    """Bounding-box index table: lookup[flat(z)] = row of z in sites, else -1."""
    lo = sites.min(axis=0)
    hi = sites.max(axis=0)
    shape = (hi - lo + 1).astype(np.int64)
    strides = np.ones(len(shape), np.int64)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    lookup = np.full(int(shape.prod()), -1, np.int32)
    flat = ((sites - lo) * strides).sum(axis=1)
    lookup[flat] = np.arange(len(sites), dtype=np.int32)
    return lookup, lo, hi, strides


def capacity_mc(
    sites,
    replicas: int,
    stop_radius: int,
    *,
    seed: int = 0,
    oracle: GreenOracle | None = None,
    first_stream: int = 0,
) -> EquilibriumSolution:
    """Capacity as the sum over the set of per-site escape frequencies.

    A replica started at z counts as escaped when it crosses the truncation
    sphere without having re-entered the set at any positive time. Escapes
    so counted can still be returns in truth, so the estimate is biased
    upward; with an oracle the bias is certified via radial envelopes.
    """
    arr = _as_site_array(sites)
    dim = arr.shape[1]
    if dim <= 2:
        raise NumericError("recurrent dimension: escape probabilities vanish for dim <= 2")
    max_norm = math.sqrt(float((arr**2).sum(axis=1).max()))
    if max_norm > stop_radius / 2:
        raise NumericError("radius too small: sites must lie in B(0, stop_radius/2)")

    lookup, lo, hi, strides = dense_lookup(arr)
    esc, _ = _kernels.escape_counts(
        dim, seed, first_stream, arr, replicas, stop_radius**2, lookup, lo, hi, strides,
        2000 * stop_radius**2 + 1000,
    )
    p = esc / replicas
    capacity = float(p.sum())
    # independent streams per site: variances add
    se = float(np.sqrt((p * (1.0 - p)).sum() / replicas))

    bias = None
    if oracle is not None:
        cert = truncation_bias_bound(stop_radius, [tuple(z) for z in arr], oracle)
        bias = len(arr) * cert.bias_bound / oracle.origin_value

    return EquilibriumSolution(
        sites=tuple(tuple(int(c) for c in z) for z in arr),
        measure=tuple(float(x) for x in p),
        capacity=capacity,
        method="Escape-MC",
        error=se,
        bias_bound=bias,
    )


def equilibrium_solve(sites, oracle: GreenOracle) -> EquilibriumSolution:
    """Capacity from the equilibrium system: Green matrix times weights = 1."""
    arr = _as_site_array(sites)
    gram = oracle.green_matrix(arr)
    ones = np.ones(len(arr))
    try:
        weights = np.linalg.solve(gram, ones)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular Gram matrix: {exc}") from exc
    if not np.all(np.isfinite(weights)):
        raise NumericError("singular Gram matrix: solve produced non-finite weights")
    residual = float(np.abs(gram @ weights - ones).max())
    return EquilibriumSolution(
        sites=tuple(tuple(int(c) for c in z) for z in arr),
        measure=tuple(float(w) for w in weights),
        capacity=float(weights.sum()),
        method="Equilibrium-Solve",
        error=residual,
        has_negative_weights=bool(weights.min() < 0),
    )


def variational_lower_bound(sites, oracle: GreenOracle) -> EquilibriumSolution:
    """Capacity lower bound from the uniform test measure.

    Puts mass |set|^(-2/d) on every site, divides total mass by the largest
    sitewise potential of that measure. ``kappa_hat`` is the bound divided
    by |set|^(1-2/d), an empirical constant for the polynomial growth law.
    """
    arr = _as_site_array(sites)
    n = len(arr)
    dim = arr.shape[1]
    mu = float(n) ** (-2.0 / dim)
    gram = oracle.green_matrix(arr)
    c = float((gram.sum(axis=1) * mu).max())
    bound = n * mu / c
    return EquilibriumSolution(
        sites=tuple(tuple(int(z) for z in s) for s in arr),
        measure=tuple(mu for _ in range(n)),
        capacity=float(bound),
        method="VariationalBound",
        error=0.0,
        kappa_hat=float(bound / n ** (1.0 - 2.0 / dim)),
    )
