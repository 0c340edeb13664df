"""Edge occupations, the coalescence trail construction, and its bounds."""

import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from walklab import (
    BoundConstants,
    EdgeOccupation,
    NumericError,
    coalesce,
    decomposition_probability,
    edge_occupation,
    extract_trail_stock,
    intersection_bound_evaluators,
    level_set_prob_bound,
    loop_transfer,
    multinomial_count_bound,
    ordered_path_sum,
    random_connected_set,
)
from walklab.trail import DEFAULT_CONSTANTS, _d2, multinomial_of_counts

A, B, C = (0, 0), (1, 0), (1, 1)


def test_from_visits_hand_example():
    occ = EdgeOccupation.from_visits([A, B, A, A])
    assert occ.counts == {(A, B): 1, (B, A): 1, (A, A): 1}
    assert occ.first_site == A and occ.last_site == A
    assert occ.visit_counts() == {A: 3, B: 1}
    assert occ.total_time() == 4


def test_from_visits_guards():
    with pytest.raises(ValueError, match="never visits"):
        EdgeOccupation.from_visits([])
    with pytest.raises(ValueError, match="outside the given site set"):
        EdgeOccupation.from_visits([A, C], sites=[A, B])


def test_edge_occupation_restricts_path():
    path = [A, (5, 5), B, (9, 9), B, A]
    occ = edge_occupation(path, [A, B])
    # restriction sees the visit string A B B A
    assert occ.counts == {(A, B): 1, (B, B): 1, (B, A): 1}
    assert occ.total_time() == 4
    with pytest.raises(ValueError, match="never visits"):
        edge_occupation([(5, 5)], [A, B])


@given(st.lists(st.sampled_from([A, B, C]), min_size=1, max_size=40))
@settings(max_examples=200)
def test_occupation_flow_identities(visits):
    occ = EdgeOccupation.from_visits(visits)
    assert occ.total_time() == len(visits)
    assert occ.visit_counts() == dict(Counter(visits))


def test_multinomial_dominates_order_counts():
    # group every full-support visit string by its occupation trace and
    # check the per-trace string count against the multinomial bound
    for t in range(2, 6):
        groups = Counter()
        for seq in itertools.product((A, B), repeat=t):
            if set(seq) != {A, B}:
                continue
            occ = EdgeOccupation.from_visits(seq)
            key = (occ.first_site, occ.last_site, tuple(sorted(occ.counts.items())))
            groups[key] += 1
        for (first, last, counts), n_seqs in groups.items():
            bound = multinomial_of_counts((A, B), dict(counts))
            assert n_seqs <= bound


def test_multinomial_count_bound_is_exact_on_simple_trace():
    # one repeated outgoing edge permits only one interleaving
    occ = EdgeOccupation.from_visits([A, B, A, B])
    assert multinomial_count_bound(occ) == 1
    # A departs via (A,B) twice and (A,A) once: 3!/(2! 1!) = 3 interleavings
    occ = EdgeOccupation.from_visits([A, B, A, A, B])
    assert multinomial_count_bound(occ) == 3


def test_coalesce_structure():
    sites = random_connected_set(2, 7, 123)
    hier = coalesce(sites)
    assert hier.sites == tuple(sorted(set(sites)))
    sizes = [lvl.size for lvl in hier.levels]
    assert sizes == list(range(7, 0, -1))
    for lvl in hier.levels:
        merged_sites = sorted(z for c in lvl.clusters for z in c)
        assert merged_sites == sorted(hier.sites)
        if lvl.merged is not None:
            i, j = lvl.merged
            assert i != j and 0 <= i < lvl.size and 0 <= j < lvl.size
            # the merged pair realizes the level's smallest pseudo-distance
            key = (min(i, j), max(i, j))
            assert lvl.dist_sq[key] == min(lvl.dist_sq.values())


def test_coalesce_deterministic_and_guards():
    sites = random_connected_set(2, 6, 321)
    a = coalesce(sites)
    b = coalesce(list(reversed(sites)))
    assert a == b
    with pytest.raises(ValueError, match="two distinct"):
        coalesce([A])


def _assert_trail_invariants(sites, occ, ts):
    pts = tuple(sorted(set(sites)))
    n = len(pts)
    # the trail chains every site exactly once, starting from the first visit
    chain = [ts.trail[0][0]] + [e[1] for e in ts.trail]
    assert chain[0] == occ.first_site
    assert sorted(chain) == list(pts)
    for (u, v), (u2, v2) in zip(ts.trail, ts.trail[1:]):
        assert v == u2
    # unit stock: n - 1 units, one per start vertex, off the diagonal,
    # each sitting on an edge the trace actually crosses
    assert sum(ts.stock.values()) == n - 1
    assert all(c == 1 for c in ts.stock.values())
    assert len({a for (a, _) in ts.stock}) == n - 1
    for (a, b) in ts.stock:
        assert a != b
        assert occ.counts.get((a, b), 0) >= 1
    assert ts.holds
    assert ts.certificate_lhs >= ts.certificate_rhs * (1 - 1e-12)


def test_extract_trail_stock_singleton():
    occ = EdgeOccupation.from_visits([A, A, A])
    ts = extract_trail_stock([A], occ)
    assert ts.trail == () and ts.stock == {} and ts.holds


def test_extract_trail_stock_small_exhaustive():
    # every full-support visit string on a 3-site set up to time 6
    sites = [A, B, C]
    for t in range(3, 7):
        for seq in itertools.product(sites, repeat=t):
            if set(seq) != set(sites):
                continue
            occ = EdgeOccupation.from_visits(seq, sites=sites)
            _assert_trail_invariants(sites, occ, extract_trail_stock(sites, occ))


@given(st.data())
@settings(max_examples=120, deadline=None)
def test_extract_trail_stock_random_sets(data):
    inst = data.draw(st.integers(0, 10_000))
    size = data.draw(st.integers(2, 7))
    sites = random_connected_set(2, size, inst)
    # a random full-support visit string (not necessarily a lattice path;
    # the extraction only sees the trace)
    order = data.draw(st.permutations(sites))
    extra = data.draw(st.lists(st.sampled_from(sites), max_size=12))
    seq = list(order) + extra
    occ = EdgeOccupation.from_visits(seq, sites=sites)
    _assert_trail_invariants(sites, occ, extract_trail_stock(sites, occ))


def test_certificate_is_exact_integer_comparison():
    sites = random_connected_set(2, 6, 77)
    seq = list(sites) + [sites[0], sites[3], sites[1]]
    occ = EdgeOccupation.from_visits(seq, sites=sites)
    ts = extract_trail_stock(sites, occ)
    lhs_sq = math.factorial(len(set(sites))) ** 2
    for (u, v), c in ts.stock.items():
        lhs_sq *= _d2((u,), (v,)) ** c
    rhs_sq = 1
    for u, v in ts.trail:
        rhs_sq *= _d2((u,), (v,))
    assert ts.holds == (lhs_sq >= rhs_sq)


def test_extract_guards():
    occ = EdgeOccupation.from_visits([A, B, A], sites=[A, B])
    with pytest.raises(ValueError, match="different site set"):
        extract_trail_stock([A, B, C], occ)
    with pytest.raises(NumericError, match="never visited"):
        bad = EdgeOccupation(sites=(A, B), counts={(A, A): 1}, first_site=A, last_site=A)
        extract_trail_stock([A, B], bad)
    with pytest.raises(NumericError, match="disconnected"):
        bad = EdgeOccupation(
            sites=(A, B), counts={(A, A): 1, (B, B): 1}, first_site=A, last_site=A
        )
        extract_trail_stock([A, B], bad)
    with pytest.raises(NumericError, match="negative"):
        bad = EdgeOccupation(sites=(A, B), counts={(A, B): -1}, first_site=A, last_site=B)
        extract_trail_stock([A, B], bad)
    with pytest.raises(NumericError, match="unbalanced"):
        bad = EdgeOccupation(sites=(A, B), counts={(A, B): 2}, first_site=A, last_site=B)
        extract_trail_stock([A, B], bad)


def test_stock_degeneracy_bounded():
    # distinct occupations mapping to the same loop-transferred image:
    # at most (|sites| - 1)^|sites| preimages
    sites = [A, B, C]
    images = Counter()
    seen = set()
    for t in range(3, 7):
        for seq in itertools.product(sites, repeat=t):
            if set(seq) != set(sites):
                continue
            occ = EdgeOccupation.from_visits(seq, sites=sites)
            occ_key = (occ.first_site, occ.last_site, tuple(sorted(occ.counts.items())))
            if occ_key in seen:
                continue
            seen.add(occ_key)
            ts = extract_trail_stock(sites, occ)
            image = loop_transfer(occ, ts.stock)
            images[(occ.first_site, occ.last_site, tuple(sorted(image.items())))] += 1
    assert max(images.values()) <= (len(sites) - 1) ** len(sites)


def test_loop_transfer_preserves_out_degrees():
    sites = random_connected_set(2, 5, 99)
    seq = list(sites) + [sites[1], sites[0]]
    occ = EdgeOccupation.from_visits(seq, sites=sites)
    ts = extract_trail_stock(sites, occ)
    image = loop_transfer(occ, ts.stock)
    for z in sites:
        before = sum(c for (a, _), c in occ.counts.items() if a == z)
        after = sum(c for (a, _), c in image.items() if a == z)
        assert before == after
    # moving units onto loops only concentrates counts: the multinomial of
    # the image divides into the original within a factor n_bar^|sites|
    n_bar = max(occ.visit_counts().values())
    left = multinomial_of_counts(occ.sites, occ.counts)
    right = multinomial_of_counts(occ.sites, image)
    assert left <= n_bar ** len(occ.sites) * right


def test_loop_transfer_guards():
    occ = EdgeOccupation.from_visits([A, B, A])
    with pytest.raises(ValueError, match="stock exceeds occupation"):
        loop_transfer(occ, {(A, B): 2})
    # loops and zero-count stock entries are ignored
    assert loop_transfer(occ, {(A, A): 3, (A, B): 0}) == {k: v for k, v in occ.counts.items()}


def test_ordered_path_sum_matches_enumeration():
    rng = np.random.default_rng(6)
    w = rng.uniform(0.1, 1.0, size=(5, 5))
    brute = 0.0
    for perm in itertools.permutations(range(1, 5)):
        term = w[0, perm[0]]
        for a, b in zip(perm, perm[1:]):
            term *= w[a, b]
        brute += term
    assert ordered_path_sum(w) == pytest.approx(brute, rel=1e-12)
    assert ordered_path_sum(np.ones((1, 1))) == 1.0


def test_level_set_bound_singleton_formula(oracle5):
    origin = (0, 0, 0, 0, 0)
    cap = 1.0 / oracle5.origin_value
    c_d = 2.0
    for n in (5, 10, 20):
        got = level_set_prob_bound([origin], {origin: n}, oracle5, c_d)
        assert got == pytest.approx(c_d * n * math.exp(-n * cap), rel=1e-12)
    vals = [level_set_prob_bound([origin], {origin: n}, oracle5, c_d) for n in (5, 10, 20)]
    assert vals[0] > vals[1] > vals[2]


def test_level_set_bound_guards(oracle5):
    origin = (0, 0, 0, 0, 0)
    e1 = (1, 0, 0, 0, 0)
    with pytest.raises(ValueError, match="every site"):
        level_set_prob_bound([origin, e1], {origin: 1}, oracle5, 2.0)
    with pytest.raises(ValueError, match="positive"):
        level_set_prob_bound([origin], {origin: 0}, oracle5, 2.0)


def test_intersection_bound_formulas():
    const = DEFAULT_CONSTANTS[5]
    n, m, L = 6, 7, 32
    out = intersection_bound_evaluators(n, m, L, const)
    log_upper = (
        L * math.log(const.upper_prefactor * n * m)
        + 10 * math.lgamma(L + 1)
        - const.decay_rate * (n + m) * L ** (1 - 0.4)
    )
    assert out.log_upper == pytest.approx(log_upper)
    assert out.log_lower == pytest.approx(-(n + m) * L ** (1 - 0.4 + const.epsilon))
    assert out.regime_ratio == pytest.approx((n + m) / L**0.4)
    assert not out.sparse_regime  # ratio = 13 / 4 here
    assert out.upper == math.inf  # this log_upper is astronomically positive
    assert 0 < out.lower < 1
    assert intersection_bound_evaluators(100, 100, 32, const).sparse_regime
    with pytest.raises(ValueError):
        intersection_bound_evaluators(0, 1, 1, const)


def test_bound_constants_epsilon_window():
    with pytest.raises(ValueError, match="epsilon"):
        BoundConstants(dim=5, upper_prefactor=1.0, decay_rate=0.3, epsilon=0.5)
    ok = BoundConstants(dim=5, upper_prefactor=1.0, decay_rate=0.3, epsilon=0.39)
    assert ok.epsilon == 0.39


def test_decomposition_probability_hand_cases():
    entry = {A: 0.5, B: 0.3}
    edge = {(A, A): 0.2, (A, B): 0.1, (B, A): 0.4, (B, B): 0.05}
    esc = {A: 0.6, B: 0.7}
    # single visit: enter then escape
    assert decomposition_probability({A: 1}, entry, edge, esc) == pytest.approx(0.5 * 0.6)
    # visits {A: 2, B: 1}: orders AAB, ABA, BAA
    expected = (
        entry[A] * edge[(A, A)] * edge[(A, B)] * esc[B]
        + entry[A] * edge[(A, B)] * edge[(B, A)] * esc[A]
        + entry[B] * edge[(B, A)] * edge[(A, A)] * esc[A]
    )
    got = decomposition_probability({A: 2, B: 1}, entry, edge, esc)
    assert got == pytest.approx(expected, rel=1e-12)


def test_decomposition_probability_guards():
    with pytest.raises(ValueError, match="positive"):
        decomposition_probability({}, {}, {}, {})
    with pytest.raises(ValueError, match="positive"):
        decomposition_probability({A: 0}, {A: 1.0}, {}, {A: 1.0})
    # zero-probability branches are pruned before any escape lookup
    assert decomposition_probability({A: 1, B: 1}, {A: 1.0, B: 0.0}, {(A, B): 0.0}, {}) == 0.0


def test_json_roundtrips():
    occ = EdgeOccupation.from_visits([A, B, B, A, C], sites=[A, B, C])
    back = EdgeOccupation.from_json_dict(occ.to_json_dict())
    assert back == occ
    ts = extract_trail_stock([A, B, C], occ)
    d = ts.to_json_dict()
    assert set(d) == {"trail", "stock", "certificate_lhs", "certificate_rhs", "holds"}
    assert d["holds"] is True
    assert len(d["stock"]) == 2
