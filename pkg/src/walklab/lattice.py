"""Lazy random walks on Z^d and their local-time fields.

The walk takes 2d+1 equally likely moves per step: stay put, or move one
unit along a coordinate axis. Local times count visits starting at time 0
(configurable). Infinite-horizon quantities are approximated by stopping the
walk the first time it leaves a Euclidean ball of radius R, with an explicit
bias certificate from a Green-function envelope (``truncation_bias_bound``).

Single trajectories are simulated here in plain Python off the same counter
streams as the compiled ensemble kernels, so a trajectory produced by this
module matches replica r of the corresponding kernel run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .rng import CounterStream

_GUARD_FACTOR = 2000  # step guard per unit of stop_radius**2


@dataclass(frozen=True)
class Finite:
    """Horizon: exactly ``steps`` steps (the path S_0 .. S_steps)."""

    steps: int


@dataclass(frozen=True)
class TruncatedInfinite:
    """Horizon: run until the walk first leaves the ball |S| > stop_radius.

    The exit position itself is still recorded; everything it contributes
    lies outside the ball, which the bias certificate accounts for.
    """

    stop_radius: int


@dataclass(frozen=True)
class AtLeast:
    threshold: float


@dataclass(frozen=True)
class Exactly:
    count: int


@dataclass(frozen=True)
class WalkState:
    """Walk position plus its stream cursor; advanced functionally."""

    dim: int
    position: tuple[int, ...]
    step_count: int
    seed: int
    replica: int
    _counter: int = 0


def walk_state(dim: int, seed: int, replica: int = 0) -> WalkState:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return WalkState(dim=dim, position=(0,) * dim, step_count=0, seed=seed, replica=replica)


def _move_from_uniform(u: float, dim: int) -> int:
    m = int(u * (2 * dim + 1))
    return min(m, 2 * dim)


def step_walk(state: WalkState) -> WalkState:
    """One lazy step. Identical (dim, seed, replica) prefixes give identical
    positions, independent of where or when the steps are taken."""
    stream = CounterStream(state.seed, state.replica, counter=state._counter)
    u = float(stream.next_uniforms(1)[0])
    m = _move_from_uniform(u, state.dim)
    pos = list(state.position)
    if m != 2 * state.dim:
        axis = m >> 1
        pos[axis] += 1 if (m & 1) == 1 else -1
    return WalkState(
        dim=state.dim,
        position=tuple(pos),
        step_count=state.step_count + 1,
        seed=state.seed,
        replica=state.replica,
        _counter=stream.counter,
    )


@dataclass
class LocalTimeField:
    """Sparse visit counts of one trajectory.

    counts maps lattice points (tuples) to positive visit counts. ``steps``
    is the realized number of steps; for a truncated horizon this is the
    (random) exit time.
    """

    dim: int
    counts: dict[tuple[int, ...], int]
    horizon: Finite | TruncatedInfinite
    origin_included: bool
    steps: int
    end_position: tuple[int, ...]
    seed: int = 0
    replica: int = 0

    def get(self, z) -> int:
        return self.counts.get(tuple(z), 0)

    def total_mass(self) -> int:
        return sum(self.counts.values())

    def support(self) -> list[tuple[int, ...]]:
        return sorted(self.counts)

    def to_json_dict(self) -> dict:
        items = sorted(self.counts.items())
        return {
            "dim": self.dim,
            "origin_included": self.origin_included,
            "steps": self.steps,
            "end_position": list(self.end_position),
            "sites": [list(z) for z, _ in items],
            "counts": [c for _, c in items],
        }


def simulate_local_times(
    dim: int,
    seed: int,
    horizon: Finite | TruncatedInfinite,
    *,
    origin_included: bool = True,
    replica: int = 0,
    chunk: int = 1024,
) -> LocalTimeField:
    """Local-time field of one walk under the given horizon.

    For ``TruncatedInfinite`` the walk must be transient to terminate, so
    dim <= 2 is rejected. A generous step guard catches the (probability
    ~ exp(-huge)) event of a transient walk overstaying.
    """
    truncated = isinstance(horizon, TruncatedInfinite)
    if truncated:
        if dim <= 2:
            raise NumericError(
                "nonterminating truncation: an infinite-horizon local time needs a transient walk (dim >= 3)"
            )
        if horizon.stop_radius < 1:
            raise ValueError("stop_radius must be >= 1")
        stop_sq = horizon.stop_radius**2
        max_steps = _GUARD_FACTOR * stop_sq + 1000
    else:
        if horizon.steps < 0:
            raise ValueError("steps must be >= 0")
        max_steps = horizon.steps

    stream = CounterStream(seed, replica)
    pos = [0] * dim
    counts: dict[tuple[int, ...], int] = {}
    if origin_included:
        counts[tuple(pos)] = 1
    normsq = 0
    steps = 0
    n_moves = 2 * dim + 1

    def finished() -> bool:
        return normsq > stop_sq if truncated else steps >= max_steps

    while not finished():
        if truncated and steps >= max_steps:
            raise NumericError("nonterminating truncation: step guard exceeded")
        us = stream.next_uniforms(min(chunk, max_steps - steps))
        for u in us:
            m = min(int(u * n_moves), n_moves - 1)
            if m != 2 * dim:
                axis = m >> 1
                delta = 1 if (m & 1) == 1 else -1
                old = pos[axis]
                pos[axis] = old + delta
                normsq += 2 * old * delta + 1
            steps += 1
            key = tuple(pos)
            counts[key] = counts.get(key, 0) + 1
            if finished():
                break

    return LocalTimeField(
        dim=dim,
        counts=counts,
        horizon=horizon,
        origin_included=origin_included,
        steps=steps,
        end_position=tuple(pos),
        seed=seed,
        replica=replica,
    )


def level_set(field: LocalTimeField, mode: AtLeast | Exactly) -> list[tuple[int, ...]]:
    """Sites whose local time passes the mode's test, in lexicographic order."""
    if isinstance(mode, AtLeast):
        picked = [z for z, c in field.counts.items() if c >= mode.threshold]
    elif isinstance(mode, Exactly):
        picked = [z for z, c in field.counts.items() if c == mode.count]
    else:
        raise TypeError(f"unsupported level-set mode: {mode!r}")
    return sorted(picked)


@dataclass(frozen=True)
class TruncationCertificate:
    """Upper bound on the expected visits a truncated walk forfeits.

    For any start y with |y| in (stop_radius, stop_radius + 1], the expected
    future visits to the site set are at most sum_z env(stop_radius - |z|),
    where env(r) is a certified upper envelope of the Green function over
    distances >= r. Valid whenever the sites sit inside B(0, stop_radius/2).
    """

    stop_radius: int
    sites: tuple[tuple[int, ...], ...]
    bias_bound: float


def truncation_bias_bound(stop_radius: int, sites, green_oracle) -> TruncationCertificate:
    """Certificate for truncating infinite-horizon visit counts at stop_radius.

    The envelope argument |y - z| >= stop_radius - |z| uses the triangle
    inequality, so the bound is monotone nonincreasing in stop_radius.
    """
    pts = [tuple(int(c) for c in z) for z in sites]
    if not pts:
        raise ValueError("sites must be nonempty")
    radii = [math.sqrt(sum(c * c for c in z)) for z in pts]
    if max(radii) > stop_radius / 2:
        raise NumericError(
            f"radius too small: sites must lie in B(0, stop_radius/2) = B(0, {stop_radius / 2:g})"
        )
    bound = 0.0
    for r in radii:
        bound += green_oracle.radial_envelope(stop_radius - r)
    return TruncationCertificate(stop_radius=stop_radius, sites=tuple(pts), bias_bound=float(bound))


def random_connected_set(dim: int, size: int, seed: int, *, stream_id: int = 0) -> list[tuple[int, ...]]:
    """Deterministic random lattice animal containing the origin.

    Grows site by site, choosing uniformly among the current boundary
    neighbors; used for capacity and level-set experiments on irregular
    shapes.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    stream = CounterStream(seed, stream_id)
    current = {(0,) * dim}
    while len(current) < size:
        boundary = set()
        for z in current:
            for axis in range(dim):
                for delta in (-1, 1):
                    nbr = z[:axis] + (z[axis] + delta,) + z[axis + 1 :]
                    if nbr not in current:
                        boundary.add(nbr)
        cand = sorted(boundary)
        pick = int(stream.next_below(len(cand), 1)[0])
        current.add(cand[pick])
    return sorted(current)
