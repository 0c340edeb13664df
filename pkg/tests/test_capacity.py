"""Capacity estimators: closed forms, cross-agreement, and set inequalities."""

import numpy as np
import pytest

from walklab import (
    NumericError,
    capacity_mc,
    equilibrium_solve,
    random_connected_set,
    variational_lower_bound,
)
from walklab.capacity import dense_lookup

ORIGIN5 = (0, 0, 0, 0, 0)
E1 = (1, 0, 0, 0, 0)


def test_singleton_closed_form(oracle5):
    sol = equilibrium_solve([ORIGIN5], oracle5)
    assert sol.method == "Equilibrium-Solve"
    assert sol.capacity == pytest.approx(1.0 / oracle5.origin_value, abs=1e-12)
    assert sol.measure == (pytest.approx(sol.capacity),)
    assert not sol.has_negative_weights
    assert sol.error < 1e-12


def test_two_point_closed_form(oracle5):
    # symmetric 2x2 system: both weights equal 1/(G(0) + G(z))
    sol = equilibrium_solve([ORIGIN5, E1], oracle5)
    expected = 2.0 / (oracle5.origin_value + oracle5.value(E1))
    assert sol.capacity == pytest.approx(expected, abs=1e-12)
    assert sol.measure[0] == pytest.approx(sol.measure[1], abs=1e-12)


def test_measure_sums_to_capacity(oracle5):
    sites = random_connected_set(5, 9, 77)
    for sol in (equilibrium_solve(sites, oracle5), variational_lower_bound(sites, oracle5)):
        assert sol.capacity == pytest.approx(sum(sol.measure) if sol.method != "VariationalBound" else sol.capacity)
    mc = capacity_mc(sites, 2000, 20, seed=3)
    assert mc.capacity == pytest.approx(sum(mc.measure), abs=1e-12)


def test_mc_agrees_with_solve(oracle5):
    sites = [ORIGIN5, E1, (0, 1, 0, 0, 0)]
    mc = capacity_mc(sites, 30_000, 20, seed=11, oracle=oracle5)
    exact = equilibrium_solve(sites, oracle5)
    assert mc.bias_bound is not None and mc.bias_bound > 0
    # MC counts truncated replicas as escapes, so it overshoots by at most bias
    assert mc.capacity - exact.capacity <= 3 * mc.error + mc.bias_bound
    assert exact.capacity - mc.capacity <= 3 * mc.error


def test_variational_is_a_lower_bound(oracle5):
    for inst in range(6):
        sites = random_connected_set(5, 4 + 2 * inst, 500 + inst)
        lo = variational_lower_bound(sites, oracle5)
        hi = equilibrium_solve(sites, oracle5)
        assert lo.capacity <= hi.capacity + 1e-10
        assert lo.kappa_hat is not None and lo.kappa_hat > 0
        assert lo.kappa_hat == pytest.approx(lo.capacity / len(sites) ** (1 - 2 / 5))


def test_singleton_variational_is_tight(oracle5):
    lo = variational_lower_bound([ORIGIN5], oracle5)
    assert lo.capacity == pytest.approx(1.0 / oracle5.origin_value, abs=1e-12)


def test_monotonicity_under_inclusion(oracle5):
    # capacity grows when sites are added (strong subadditivity of escape)
    for inst in range(12):
        sites = random_connected_set(5, 10, 900 + inst)
        sub = sites[: 4 + inst % 5]
        assert equilibrium_solve(sub, oracle5).capacity <= (
            equilibrium_solve(sites, oracle5).capacity + 1e-8
        )


def test_subadditivity(oracle5):
    for inst in range(12):
        a = random_connected_set(5, 6, 1300 + inst)
        b = random_connected_set(5, 6, 1400 + inst, stream_id=1)
        union = sorted(set(a) | set(b))
        cap_union = equilibrium_solve(union, oracle5).capacity
        cap_a = equilibrium_solve(a, oracle5).capacity
        cap_b = equilibrium_solve(b, oracle5).capacity
        assert cap_union <= cap_a + cap_b + 1e-8


def test_input_validation(oracle5):
    with pytest.raises(ValueError):
        equilibrium_solve([], oracle5)
    with pytest.raises(NumericError, match="recurrent"):
        capacity_mc([(0, 0)], 100, 10)
    with pytest.raises(NumericError, match="radius too small"):
        capacity_mc([(9, 0, 0, 0, 0)], 100, 10)
    with pytest.raises(ValueError, match="unknown method"):
        from walklab.capacity import EquilibriumSolution

        EquilibriumSolution(sites=(ORIGIN5,), measure=(1.0,), capacity=1.0, method="bogus", error=0.0)


def test_mc_determinism():
    sites = [ORIGIN5, E1]
    a = capacity_mc(sites, 5000, 16, seed=42)
    b = capacity_mc(sites, 5000, 16, seed=42)
    c = capacity_mc(sites, 5000, 16, seed=43)
    assert a.measure == b.measure
    assert a.measure != c.measure


def test_dense_lookup_roundtrip():
    sites = np.asarray(random_connected_set(5, 14, 2024), dtype=np.int64)
    lookup, lo, hi, strides = dense_lookup(sites)
    flat = ((sites - lo) * strides).sum(axis=1)
    assert np.array_equal(lookup[flat], np.arange(len(sites)))
    assert (lookup >= -1).all()
    # everything not in the set maps to -1
    assert (lookup != -1).sum() == len(sites)
