"""Path combinatorics over a finite site set.

A walk restricted to a finite set of sites leaves a trace: counts of
oriented consecutive-visit pairs (loops included). This module turns such
traces into certified combinatorial structure. The centerpiece replaces a
trace by a self-avoiding trail covering the set plus a unit "stock" of
trace edges, such that the trail's product of Euclidean edge lengths is
dominated by the stock's product times a factorial of the set size. The
construction walks back up a coalescence hierarchy (repeatedly merging
the two closest clusters), splicing the merged pair into the trail and
re-homing stock units level by level.

Also here: the multinomial bound on how many visit orders share one trace,
the stock-to-loop transfer used to re-sum traces, and plain-arithmetic
evaluators for the level-set probability bounds built on these pieces.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .capacity import equilibrium_solve
from .errors import NumericError
from .green import GreenOracle

Site = tuple[int, ...]
Cluster = tuple[Site, ...]  # sites sorted lexicographically


def _as_site(z) -> Site:
    return tuple(int(c) for c in z)


def _d2(c1: Iterable[Site], c2: Iterable[Site]) -> int:
    """Squared Euclidean cluster pseudo-distance: min over representatives."""
    best = None
    for x in c1:
        for y in c2:
            s = sum((a - b) ** 2 for a, b in zip(x, y))
            if best is None or s < best:
                best = s
    return best


# ---------------------------------------------------------------------------
# edge occupations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeOccupation:
    """Oriented consecutive-visit counts of a path restricted to `sites`.

    `counts[(a, b)]` is the number of times a visit to a was immediately
    followed (within the restriction) by a visit to b; loops (a, a) count
    consecutive visits to the same site, e.g. a lazy stay. The visit count
    of z is its outgoing total plus one if z is the last visited site.
    """

    sites: tuple[Site, ...]
    counts: Mapping[tuple[Site, Site], int]
    first_site: Site
    last_site: Site

    @classmethod
    def from_visits(cls, visits: Sequence, sites=None) -> "EdgeOccupation":
        vs = [_as_site(v) for v in visits]
        if not vs:
            raise ValueError("path never visits the site set")
        universe = tuple(sorted(set(vs))) if sites is None else tuple(sorted(_as_site(z) for z in sites))
        missing = set(vs) - set(universe)
        if missing:
            raise ValueError(f"visit at {sorted(missing)[0]} lies outside the given site set")
        counts: dict[tuple[Site, Site], int] = {}
        for a, b in zip(vs, vs[1:]):
            counts[(a, b)] = counts.get((a, b), 0) + 1
        return cls(sites=universe, counts=counts, first_site=vs[0], last_site=vs[-1])

    def visit_counts(self) -> dict[Site, int]:
        n = {z: 0 for z in self.sites}
        for (a, _), c in self.counts.items():
            n[a] += c
        n[self.last_site] += 1
        return n

    def total_time(self) -> int:
        return sum(self.counts.values()) + 1

    def to_json_dict(self) -> dict:
        return {
            "sites": [list(z) for z in self.sites],
            "counts": sorted([list(a), list(b), c] for (a, b), c in self.counts.items() if c),
            "first_site": list(self.first_site),
            "last_site": list(self.last_site),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "EdgeOccupation":
        return cls(
            sites=tuple(sorted(_as_site(z) for z in data["sites"])),
            counts={(_as_site(a), _as_site(b)): int(c) for a, b, c in data["counts"]},
            first_site=_as_site(data["first_site"]),
            last_site=_as_site(data["last_site"]),
        )


def edge_occupation(path: Sequence, sites) -> EdgeOccupation:
    """Restrict a full lattice path to its visits of `sites` and count edges."""
    universe = {_as_site(z) for z in sites}
    visits = [_as_site(p) for p in path if _as_site(p) in universe]
    if not visits:
        raise ValueError("path never visits the site set")
    return EdgeOccupation.from_visits(visits, sites=sites)


def multinomial_of_counts(sites, counts: Mapping[tuple[Site, Site], int]) -> int:
    """Product over sites of (outgoing total)! / prod (per-edge count)!."""
    total = 1
    for z in sites:
        out = [c for (a, _), c in counts.items() if a == z and c]
        total *= math.factorial(sum(out))
        for c in out:
            total //= math.factorial(c)
    return total


def multinomial_count_bound(occupation: EdgeOccupation) -> int:
    """Exact upper bound on the number of visit orders sharing this trace."""
    return multinomial_of_counts(occupation.sites, occupation.counts)


# ---------------------------------------------------------------------------
# coalescence hierarchy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoalescenceLevel:
    size: int
    clusters: tuple[Cluster, ...]  # lexicographically ordered
    dist_sq: Mapping[tuple[int, int], int]  # key (i, j) with i < j
    # indices in `clusters` of the pair merged to produce the next level,
    # oriented so the first contains the lexicographically smaller endpoint
    # of the distance-realizing site pair; None at the root
    merged: tuple[int, int] | None


@dataclass(frozen=True)
class CoalescenceHierarchy:
    sites: tuple[Site, ...]
    levels: tuple[CoalescenceLevel, ...]  # sizes N, N-1, ..., 1

    def level_of_size(self, k: int) -> CoalescenceLevel:
        return self.levels[len(self.sites) - k]


def coalesce(sites) -> CoalescenceHierarchy:
    """Merge the closest pair of clusters until one remains.

    The pseudo-distance between clusters is the minimum Euclidean distance
    over representatives (it fails the triangle inequality, deliberately).
    Ties break on the lexicographically smallest realizing (site, site)
    pair, making the hierarchy reproducible.
    """
    pts = tuple(sorted({_as_site(z) for z in sites}))
    if len(pts) < 2:
        raise ValueError("need at least two distinct sites")
    clusters: list[Cluster] = [(z,) for z in pts]
    levels: list[CoalescenceLevel] = []

    while True:
        k = len(clusters)
        dist_sq = {}
        for i in range(k):
            for j in range(i + 1, k):
                dist_sq[(i, j)] = _d2(clusters[i], clusters[j])
        if k == 1:
            levels.append(CoalescenceLevel(size=1, clusters=tuple(clusters), dist_sq={}, merged=None))
            break

        best_key = None
        best = None
        for i in range(k):
            for j in range(i + 1, k):
                d2 = dist_sq[(i, j)]
                if best_key is not None and d2 > best_key[0]:
                    continue
                pair = min(
                    min((x, y), (y, x))
                    for x in clusters[i]
                    for y in clusters[j]
                    if sum((a - b) ** 2 for a, b in zip(x, y)) == d2
                )
                key = (d2, pair)
                if best_key is None or key < best_key:
                    best_key = key
                    best = (i, j, pair)
        i, j, pair = best
        # orient: first index owns the smaller realizing endpoint
        if pair[0] in clusters[j]:
            i, j = j, i
        levels.append(CoalescenceLevel(size=k, clusters=tuple(clusters), dist_sq=dist_sq, merged=(i, j)))
        merged_cluster = tuple(sorted(clusters[i] + clusters[j]))
        clusters = sorted([c for idx, c in enumerate(clusters) if idx not in (i, j)] + [merged_cluster])

    return CoalescenceHierarchy(sites=pts, levels=tuple(levels))


# ---------------------------------------------------------------------------
# trail and stock extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrailStock:
    """A covering self-avoiding trail plus the unit stock that certifies it.

    certificate_lhs = |sites|! times the product of stocked edge lengths;
    certificate_rhs = the product of trail edge lengths. `holds` compares
    the squared products exactly in integer arithmetic.
    """

    trail: tuple[tuple[Site, Site], ...]
    stock: Mapping[tuple[Site, Site], int]
    certificate_lhs: float
    certificate_rhs: float
    holds: bool

    def to_json_dict(self) -> dict:
        return {
            "trail": [[list(a), list(b)] for a, b in self.trail],
            "stock": sorted([list(a), list(b), c] for (a, b), c in self.stock.items()),
            "certificate_lhs": self.certificate_lhs,
            "certificate_rhs": self.certificate_rhs,
            "holds": self.holds,
        }


def _aggregate(counts: Mapping[tuple[Site, Site], int], clusters: Sequence[Cluster]):
    owner: dict[Site, Cluster] = {}
    for c in clusters:
        for z in c:
            owner[z] = c
    agg: dict[tuple[Cluster, Cluster], int] = {}
    for (a, b), cnt in counts.items():
        if cnt:
            key = (owner[a], owner[b])
            agg[key] = agg.get(key, 0) + cnt
    return agg


def _validate_occupation(sites: tuple[Site, ...], occ: EdgeOccupation) -> None:
    if set(occ.sites) != set(sites):
        raise ValueError("occupation was built over a different site set")
    outs = {z: 0 for z in sites}
    ins = {z: 0 for z in sites}
    for (a, b), c in occ.counts.items():
        if c < 0:
            raise NumericError("inconsistent occupation: negative edge count")
        outs[a] += c
        ins[b] += c
    for z in sites:
        # every visit except the last departs; every visit except the first arrives
        if outs[z] + (1 if z == occ.last_site else 0) != ins[z] + (1 if z == occ.first_site else 0):
            raise NumericError(f"inconsistent occupation: visit flow unbalanced at {z}")
    n = occ.visit_counts()
    never = [z for z in sites if n[z] == 0]
    if never:
        raise NumericError(f"not path-realizable: site {never[0]} is never visited")
    # balanced digraph (after the virtual last->first edge) traces a path
    # iff the positive-degree graph is connected
    if len(sites) > 1:
        adj: dict[Site, set[Site]] = {z: set() for z in sites}
        for (a, b), c in occ.counts.items():
            if c and a != b:
                adj[a].add(b)
                adj[b].add(a)
        adj[occ.last_site].add(occ.first_site)
        adj[occ.first_site].add(occ.last_site)
        seen = {occ.first_site}
        frontier = [occ.first_site]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        if len(seen) != len(sites):
            raise NumericError("not path-realizable: occupation graph is disconnected")


def extract_trail_stock(sites, occupation: EdgeOccupation) -> TrailStock:
    """Build the trail and stock whose length products satisfy the
    factorial-domination certificate.

    Climbs the coalescence hierarchy from two clusters back to singletons.
    At each un-merge the single affected trail vertex is spliced into the
    two children (entering on the side nearer the predecessor, or on the
    start site's side when the vertex heads the trail), the stock unit
    held by or aimed at the merged vertex is re-homed to a child that the
    trace supports, and one fresh unit is placed on a trace edge leaving a
    vertex that carries none. A float check of the running inequality
    guards every level; the final certificate is compared exactly.
    """
    pts = tuple(sorted({_as_site(z) for z in sites}))
    _validate_occupation(pts, occupation)
    n_sites = len(pts)
    z1 = occupation.first_site

    if n_sites == 1:
        return TrailStock(trail=(), stock={}, certificate_lhs=1.0, certificate_rhs=1.0, holds=True)

    hier = coalesce(pts)
    counts = occupation.counts
    log_nfact = math.lgamma(n_sites + 1)

    lvl2 = hier.level_of_size(2)
    a2, b2 = lvl2.clusters
    if z1 not in a2:
        a2, b2 = b2, a2
    e2 = _aggregate(counts, lvl2.clusters)
    if e2.get((a2, b2), 0) < 1:
        raise NumericError("not path-realizable: no crossing between the two halves")
    trail: list[Cluster] = [a2, b2]
    stock: dict[Cluster, Cluster] = {a2: b2}

    def _check_level(k: int) -> None:
        # running inequality: N!/(N-k+2)! * prod stocked >= prod trail, in logs
        lhs = log_nfact - math.lgamma(n_sites - k + 3)
        for v, w in stock.items():
            lhs += 0.5 * math.log(_d2(v, w))
        rhs = sum(0.5 * math.log(_d2(u, v)) for u, v in zip(trail, trail[1:]))
        if lhs < rhs - 1e-9:
            raise NumericError(f"certificate chain violated at level {k}")

    _check_level(2)

    for k in range(3, n_sites + 1):
        lvl_k = hier.level_of_size(k)
        ia, ja = lvl_k.merged
        side_a, side_b = lvl_k.clusters[ia], lvl_k.clusters[ja]
        psi = tuple(sorted(side_a + side_b))
        ek = _aggregate(counts, lvl_k.clusters)

        new_stock: dict[Cluster, Cluster] = {}
        for v, w in stock.items():
            nv, nw = v, w
            if v == psi:
                nv = side_a if ek.get((side_a, w), 0) >= 1 else side_b
                if ek.get((nv, w), 0) < 1:
                    raise NumericError("not path-realizable: stock unit lost its trace support")
            if w == psi:
                nw = side_a if ek.get((nv, side_a), 0) >= 1 else side_b
                if ek.get((nv, nw), 0) < 1:
                    raise NumericError("not path-realizable: stock unit lost its trace support")
            new_stock[nv] = nw

        carriers = set(new_stock)
        best = None
        for v in lvl_k.clusters:
            if v in carriers:
                continue
            for w in lvl_k.clusters:
                if w == v or ek.get((v, w), 0) < 1:
                    continue
                key = (_d2(v, w), (v, w))
                if best is None or key < best:
                    best = key
        if best is None:
            raise NumericError("not path-realizable: no stock-free vertex with an outgoing trace edge")
        d2_star, (v_star, w_star) = best
        assert d2_star >= _d2(side_a, side_b)
        new_stock[v_star] = w_star
        stock = new_stock

        p = trail.index(psi)
        if p == 0:
            x = side_a if z1 in side_a else side_b
            y = side_b if x is side_a else side_a
            trail = [x, y] + trail[1:]
        elif p == len(trail) - 1:
            b = trail[-2]
            x = side_a if _d2(b, side_a) <= _d2(b, side_b) else side_b
            y = side_b if x is side_a else side_a
            trail = trail[:-1] + [x, y]
        else:
            b = trail[p - 1]
            x = side_a if _d2(b, side_a) <= _d2(b, side_b) else side_b
            y = side_b if x is side_a else side_a
            trail = trail[:p] + [x, y] + trail[p + 1 :]

        _check_level(k)

    # singleton clusters now; drop to plain sites
    site_trail = tuple((u[0], v[0]) for u, v in zip(trail, trail[1:]))
    site_stock = {(v[0], w[0]): 1 for v, w in stock.items()}

    lhs_sq = math.factorial(n_sites) ** 2
    for (u, v), c in site_stock.items():
        lhs_sq *= _d2((u,), (v,)) ** c
    rhs_sq = 1
    for u, v in site_trail:
        rhs_sq *= _d2((u,), (v,))

    return TrailStock(
        trail=site_trail,
        stock=site_stock,
        certificate_lhs=math.factorial(n_sites) * math.sqrt(math.prod(_d2((u,), (v,)) for (u, v) in site_stock)),
        certificate_rhs=math.sqrt(rhs_sq),
        holds=lhs_sq >= rhs_sq,
    )


def loop_transfer(occupation: EdgeOccupation, stock: Mapping[tuple[Site, Site], int]):
    """Move stocked units off their edges onto loops at their start vertex.

    Returns the transferred edge counts. Per-vertex outgoing totals are
    preserved, so the multinomial bound of the image stays comparable to
    the original within a factor max visit count per site.
    """
    out = {e: c for e, c in occupation.counts.items() if c}
    for (a, b), c in stock.items():
        if a == b or c == 0:
            continue
        if out.get((a, b), 0) < c:
            raise ValueError("stock exceeds occupation on an edge")
        out[(a, b)] -= c
        if out[(a, b)] == 0:
            del out[(a, b)]
        out[(a, a)] = out.get((a, a), 0) + c
    return out


# ---------------------------------------------------------------------------
# ordered-visit sums and the level-set bound
# ---------------------------------------------------------------------------


def ordered_path_sum(weights: np.ndarray) -> float:
    """Sum over all orderings of 1..n of prod_i weights[prev, next].

    Row/column 0 is the fixed start. Dynamic programming over (visited
    subset, last vertex); identical value to direct enumeration of the n!
    orderings.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0] - 1
    if n == 0:
        return 1.0
    acc = {(1 << i, i): w[0, i + 1] for i in range(n)}
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
                acc[key] = acc.get(key, 0.0) + val * w[last + 1, nxt + 1]
    full = (1 << n) - 1
    return float(sum(acc[(full, last)] for last in range(n)))


def level_set_prob_bound(sites, profile: Mapping, oracle: GreenOracle, c_d: float) -> float:
    """Upper bound on the probability that the visit counts on `sites`
    equal `profile` exactly.

    Combines the max/min profile values, the set's equilibrium capacity,
    and a sum over visit orders of products of hitting probabilities from
    the origin. Orders are summed exactly up to nine sites; beyond that a
    factorial times column-maxima product bounds the sum from above (the
    regime where the bound is astronomically loose anyway).
    """
    pts = tuple(sorted({_as_site(z) for z in sites}))
    n_map = {_as_site(z): int(v) for z, v in dict(profile).items()}
    if set(n_map) != set(pts):
        raise ValueError("profile must assign a count to every site")
    if min(n_map.values()) < 1:
        raise ValueError("profile counts must be positive")
    n_bar = max(n_map.values())
    n_under = min(n_map.values())
    cap = equilibrium_solve(pts, oracle).capacity

    origin = (0,) * oracle.dim
    others = [z for z in pts if z != origin]
    m = len(others)
    if m == 0:
        perm_sum = 1.0
    else:
        g0 = oracle.origin_value
        chain = [origin] + others
        hit = oracle.green_matrix(np.asarray(chain, dtype=np.int64)) / g0
        if m <= 9:
            perm_sum = ordered_path_sum(hit)
        else:
            col_max = hit[:, 1:].max(axis=0)
            perm_sum = float(math.factorial(m) * np.prod(col_max))

    n = len(pts)
    log_bound = (
        n * math.log(c_d * n_bar)
        + oracle.dim * math.lgamma(n + 1)
        - n_under * cap
        + math.log(perm_sum)
    )
    return math.exp(log_bound)


@dataclass(frozen=True)
class BoundConstants:
    """Dimension-tagged constants for the intersection bound evaluators.

    Defaults are fitted by the packaged experiments at desk scale; they
    are configuration, not ground truth.
    """

    dim: int
    upper_prefactor: float
    decay_rate: float
    epsilon: float

    def __post_init__(self):
        if not 0 < self.epsilon < 2 / self.dim:
            raise ValueError(f"epsilon must lie in (0, {2 / self.dim:.4g})")


DEFAULT_CONSTANTS = {
    5: BoundConstants(dim=5, upper_prefactor=1.0, decay_rate=0.3, epsilon=0.2),
}


@dataclass(frozen=True)
class IntersectionBounds:
    upper: float
    lower: float
    log_upper: float
    log_lower: float
    regime_ratio: float  # (n + m) / L^(2/d); the upper form needs this large
    sparse_regime: bool


def intersection_bound_evaluators(n: int, m: int, L: int, constants: BoundConstants) -> IntersectionBounds:
    """Evaluate the upper and lower closed-form bounds on the probability
    that the exact-level sets of two walks share at least L sites."""
    if min(n, m, L) < 1:
        raise ValueError("n, m, L must be positive integers")
    d = constants.dim
    log_upper = (
        L * math.log(constants.upper_prefactor * n * m)
        + 2 * d * math.lgamma(L + 1)
        - constants.decay_rate * (n + m) * L ** (1 - 2 / d)
    )
    log_lower = -(n + m) * L ** (1 - 2 / d + constants.epsilon)
    ratio = (n + m) / L ** (2 / d)
    return IntersectionBounds(
        upper=math.exp(min(log_upper, 700.0)) if log_upper < 700.0 else math.inf,
        lower=math.exp(log_lower),
        log_upper=log_upper,
        log_lower=log_lower,
        regime_ratio=ratio,
        sparse_regime=ratio >= 10.0,
    )


def decomposition_probability(
    profile: Mapping,
    entry_prob: Mapping,
    edge_prob: Mapping,
    escape_prob: Mapping,
) -> float:
    """Exact-profile probability assembled from first-entry, edge-crossing
    and escape probabilities: sum over all visit orders realizing the
    profile of entry * prod of per-step edge terms * final escape.

    The caller supplies the probability maps (typically Monte Carlo
    estimates); this routine only does the combinatorial sum.
    """
    items = [( _as_site(z), int(c)) for z, c in dict(profile).items()]
    if not items or min(c for _, c in items) < 1:
        raise ValueError("profile counts must be positive")

    total = 0.0

    def recurse(prev: Site | None, remaining: dict[Site, int], weight: float, left: int):
        nonlocal total
        if left == 0:
            total += weight * escape_prob[prev]
            return
        for z in list(remaining):
            if remaining[z] == 0:
                continue
            w = weight * (entry_prob[z] if prev is None else edge_prob[(prev, z)])
            if w == 0.0:
                continue
            remaining[z] -= 1
            recurse(z, remaining, w, left - 1)
            remaining[z] += 1

    counts = {z: c for z, c in items}
    recurse(None, counts, 1.0, sum(counts.values()))
    return total
