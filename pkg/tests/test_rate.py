"""Profile-weighted Green operators and the norm-constrained rate search."""

import math

import numpy as np
import pytest

from walklab import (
    Finite,
    NumericError,
    OptimizerConfig,
    ProfileFunction,
    build_operator,
    calibrate_scale,
    minimize_rate,
    minimize_rate_ball,
    operator_norm,
    random_connected_set,
    rate_predictions,
    simulate_local_times,
    singleton_rate,
    zeta,
)
from walklab.rate import ball_sites

ORIGIN = (0, 0, 0, 0, 0)


def test_profile_function_basics():
    p = ProfileFunction.from_arrays([ORIGIN, (1, 0, 0, 0, 0)], [3.0, 4.0])
    assert p.l2_norm == pytest.approx(5.0)
    assert p.scaled(2.0).values == (6.0, 8.0)
    d = p.to_json_dict()
    assert d["l2_norm"] == pytest.approx(5.0)
    assert d["support"] == [[0, 0, 0, 0, 0], [1, 0, 0, 0, 0]]
    with pytest.raises(ValueError, match="equal length"):
        ProfileFunction(support=(ORIGIN,), values=(1.0, 2.0))
    with pytest.raises(ValueError, match="nonnegative"):
        ProfileFunction(support=(ORIGIN,), values=(-0.1,))


def test_zero_profile_gives_zero_operator(oracle5):
    p = ProfileFunction.from_arrays([ORIGIN, (1, 0, 0, 0, 0)], [0.0, 0.0])
    op = build_operator(p, oracle5)
    assert op.norm == 0.0
    assert np.all(op.kernel == 0.0)


def test_power_iteration_matches_dense(oracle5):
    for inst in range(6):
        sites = random_connected_set(5, 12, 4000 + inst)
        rng = np.random.default_rng(inst)
        p = ProfileFunction.from_arrays(sites, rng.uniform(0.05, 1.5, size=len(sites)))
        op = build_operator(p, oracle5)
        dense = float(np.linalg.eigvalsh(op.kernel)[-1])
        assert op.norm == pytest.approx(dense, abs=1e-8)
        assert not op.used_dense_fallback


def test_norm_monotone_in_scale(oracle5):
    sites = random_connected_set(5, 8, 17)
    p = ProfileFunction.from_arrays(sites, np.full(len(sites), 0.3))
    norms = [build_operator(p.scaled(c), oracle5).norm for c in (0.5, 1.0, 2.0, 4.0)]
    assert norms == sorted(norms)
    assert norms[0] < norms[-1]


def test_operator_norm_updates_in_place(oracle5):
    p = ProfileFunction.from_arrays([ORIGIN], [0.7])
    op = build_operator(p, oracle5)
    op.norm = -1.0
    got = operator_norm(op)
    assert op.norm == got > 0


def test_singleton_rate_closed_form(oracle5):
    a_star = singleton_rate(oracle5)
    assert a_star == pytest.approx(math.log1p(1.0 / (oracle5.origin_value - 1.0)), abs=1e-15)
    assert a_star == pytest.approx(1.5427231792564888, abs=1e-9)
    # the 1x1 kernel really crosses 1 there
    assert math.expm1(a_star) * (oracle5.origin_value - 1.0) == pytest.approx(1.0)


def test_calibrate_scale_singleton(oracle5):
    p = ProfileFunction.from_arrays([ORIGIN], [1.0])
    cal = calibrate_scale(p, oracle5)
    assert cal.values[0] == pytest.approx(singleton_rate(oracle5), abs=1e-5)
    norm = build_operator(cal, oracle5).norm
    assert 1.0 <= norm <= 1.0 + 1e-6 + 1e-9


def test_calibrate_scale_degenerate(oracle5):
    with pytest.raises(NumericError, match="identically zero"):
        calibrate_scale(ProfileFunction.from_arrays([ORIGIN], [0.0]), oracle5)


def test_minimize_rate_singleton_is_closed_form(oracle5):
    res = minimize_rate([ORIGIN], oracle5)
    assert res.value == singleton_rate(oracle5)
    assert res.lambda_set == (ORIGIN,)
    assert res.optimizer_trace[0]["start"] == "closed-form"
    assert res.argmin_profile.values == (res.value,)


def test_minimize_rate_feasible_and_deterministic(oracle5):
    sites = [ORIGIN, (1, 0, 0, 0, 0), (0, 1, 0, 0, 0)]
    cfg = OptimizerConfig(seed=3, restarts=1, sweeps=6)
    a = minimize_rate(sites, oracle5, cfg)
    b = minimize_rate(sites, oracle5, cfg)
    assert a.value == b.value
    assert a.argmin_profile == b.argmin_profile
    # never worse than concentrating on one site
    assert a.value <= singleton_rate(oracle5) + 1e-12
    norm = build_operator(a.argmin_profile, oracle5).norm
    assert 1.0 - 1e-7 <= norm <= 1.0 + 1e-6 + 1e-7
    assert a.value == pytest.approx(a.argmin_profile.l2_norm)


def test_minimize_rate_stall_warns(oracle5):
    # two nearly decoupled sites: no profile beats one-site concentration
    sites = [ORIGIN, (6, 0, 0, 0, 0)]
    cfg = OptimizerConfig(seed=0, restarts=1, sweeps=3)
    with pytest.warns(RuntimeWarning, match="stalled"):
        res = minimize_rate(sites, oracle5, cfg)
    assert res.value == singleton_rate(oracle5)


def test_ball_sites_counts():
    assert len(ball_sites(5, 1.0)) == 11
    assert len(ball_sites(5, 2.0)) == 221
    assert len(ball_sites(5, 3.0)) == 1343
    assert ball_sites(3, 1.0) == tuple(sorted(
        [(0, 0, 0)] + [tuple(s * int(i == ax) for i in range(3)) for ax in range(3) for s in (-1, 1)]
    ))


def test_ball_minimizer_matches_free_search(oracle5):
    cfg = OptimizerConfig(seed=1, restarts=1, sweeps=8)
    ball = minimize_rate_ball(5, 1.0, oracle5, cfg)
    free = minimize_rate(ball_sites(5, 1.0), oracle5, cfg)
    # the optimum is orbit-symmetric, so both searches find the same point
    assert ball.value == pytest.approx(free.value, rel=1e-9)
    assert ball.value == pytest.approx(1.4808168411254887, rel=1e-6)
    assert ball.value < singleton_rate(oracle5)
    # returned profile is constant on the axis orbit
    vals = dict(zip(ball.argmin_profile.support, ball.argmin_profile.values))
    axis = [v for z, v in vals.items() if z != ORIGIN]
    assert max(axis) - min(axis) < 1e-12
    assert vals[ORIGIN] > max(axis)


def test_ball_minimizer_deterministic(oracle5):
    cfg = OptimizerConfig(seed=9, restarts=1, sweeps=4)
    a = minimize_rate_ball(5, 1.0, oracle5, cfg)
    b = minimize_rate_ball(5, 1.0, oracle5, cfg)
    assert a.value == b.value
    norm = build_operator(a.argmin_profile, oracle5).norm
    assert 1.0 - 1e-7 <= norm <= 1.0 + 1e-6 + 1e-7


def test_rate_predictions():
    res = minimize_rate_result = None
    prof = ProfileFunction.from_arrays([ORIGIN], [1.5])
    from walklab import RateResult

    res = RateResult(lambda_set=(ORIGIN,), value=1.5, argmin_profile=prof, optimizer_trace=())
    rows = rate_predictions(res, [1.0, 4.0])
    assert rows[0]["self_intersection_slope"] == pytest.approx(-1.5)
    assert rows[1]["self_intersection_slope"] == pytest.approx(-3.0)
    assert all(r["intersection_slope"] == pytest.approx(-3.0) for r in rows)
    assert all(r["label"] == "finite-volume surrogate" for r in rows)
    with pytest.raises(ValueError, match="positive"):
        rate_predictions(res, [0.0])


def test_rate_result_json(oracle5):
    res = minimize_rate([ORIGIN], oracle5)
    d = res.to_json_dict()
    assert d["lambda_set"] == [[0, 0, 0, 0, 0]]
    assert d["value"] == res.value
    assert d["argmin_profile"]["values"] == [res.value]
    assert isinstance(d["optimizer_trace"], list)


def test_cauchy_schwarz_on_sampled_fields():
    # pathwise: the cross overlap is at most the geometric mean of the
    # self overlaps
    for rep in range(20):
        f = simulate_local_times(5, 6000 + 2 * rep, Finite(300))
        g = simulate_local_times(5, 6001 + 2 * rep, Finite(300))
        cross = zeta(f, g, 2.0).value
        self_f = zeta(f, f, 2.0).value
        self_g = zeta(g, g, 2.0).value
        assert cross <= math.sqrt(self_f * self_g) + 1e-9
