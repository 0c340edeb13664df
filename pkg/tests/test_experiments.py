"""Importance-sampled walk ensembles and the three experiment runners."""

import csv
import math

import numpy as np
import pytest

from walklab import (
    ExperimentConfig,
    NumericError,
    run_intersection_decomposition,
    run_level_set_geometry,
    run_range_intersection,
    tilted_overlap_samples,
    truncation_bias_bound,
)
from walklab.experiments import (
    WeightedSample,
    effective_sample_size,
    forced_return_sampler,
    self_normalized_mean,
    weighted_median,
)


def test_effective_sample_size():
    assert effective_sample_size(np.zeros(250)) == pytest.approx(250.0)
    assert effective_sample_size(np.array([])) == 0.0
    # one overwhelming weight collapses the ensemble
    lw = np.array([0.0, -50.0, -50.0])
    assert effective_sample_size(lw) == pytest.approx(1.0, abs=1e-12)


def test_self_normalized_mean_closed_form():
    values = np.array([1.0, 3.0])
    logw = np.log(np.array([1.0, 3.0]))
    mean, se = self_normalized_mean(values, logw)
    assert mean == pytest.approx(2.5)
    assert se == pytest.approx(math.sqrt(0.0625 * 2.25 + 0.5625 * 0.25))


def test_weighted_median():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    assert weighted_median(v, np.ones(4)) == 2.0
    assert weighted_median(v, np.array([0.0, 0.0, 1.0, 0.1])) == 3.0
    assert weighted_median(np.array([5.0]), np.array([2.0])) == 5.0


def test_forced_return_plain_is_unit_weight(oracle5):
    samples = forced_return_sampler(5, 3, 77, theta=0.0, replicas=3000, stop_radius=25)
    assert all(isinstance(s, WeightedSample) for s in samples)
    assert all(s.log_weight == 0.0 for s in samples)
    assert not any(s.flagged for s in samples)
    assert all(s.value >= 1 for s in samples)  # time zero counts
    vals = np.array([s.value for s in samples])
    mean = vals.mean()
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    bias = truncation_bias_bound(25, [(0, 0, 0, 0, 0)], oracle5).bias_bound
    assert abs(mean - oracle5.origin_value) <= 3 * se + bias


def test_forced_return_tilted_is_unbiased(oracle5):
    plain = forced_return_sampler(5, 3, 77, theta=0.0, replicas=3000, stop_radius=25)
    tilted = forced_return_sampler(
        5, 3, 78, theta=0.45, replicas=3000, stop_radius=25, oracle=oracle5
    )
    keep = [s for s in tilted if not s.flagged]
    pv = np.array([s.value for s in plain])
    tv = np.array([s.value for s in keep])
    tl = np.array([s.log_weight for s in keep])
    pm = pv.mean()
    pse = pv.std(ddof=1) / math.sqrt(len(pv))
    tm, tse = self_normalized_mean(tv, tl)
    assert abs(pm - tm) <= 3 * math.hypot(pse, tse)
    # tilting really reweights: the raw tilted ensemble is return-rich
    assert tv.mean() > pm
    assert effective_sample_size(tl) > 50


def test_forced_return_guards():
    with pytest.raises(ValueError, match="return_target"):
        forced_return_sampler(5, 0, 1)
    with pytest.raises(ValueError, match="theta"):
        forced_return_sampler(5, 2, 1, theta=1.0)


def test_tilted_overlap_samples_plain():
    z2, logw, flags = tilted_overlap_samples(5, 500, 15, seed=2)
    assert np.all(logw == 0.0)
    assert np.all(flags == 0)
    assert z2.min() >= 1  # both walks share the origin at time zero
    z2b, _, _ = tilted_overlap_samples(5, 500, 15, seed=2)
    assert np.array_equal(z2, z2b)


def test_tilted_overlap_samples_guards():
    with pytest.raises(ValueError, match="pairs"):
        tilted_overlap_samples(5, 0, 15)
    with pytest.raises(ValueError, match="theta"):
        tilted_overlap_samples(5, 10, 15, theta=1.2, return_target=1)
    with pytest.raises(ValueError, match="return_target"):
        tilted_overlap_samples(5, 10, 15, theta=0.5)
    with pytest.raises(ValueError, match="packing"):
        tilted_overlap_samples(6, 10, 15)


def test_run_intersection_decomposition(tmp_path, oracle5):
    cfg = ExperimentConfig.from_json_dict(
        {
            "kind": "intersection-decomposition",
            "pairs": 400,
            "stop_radius": 12,
            "t": 4.0,
            "a_grid": [0.01, "inf"],
            "seed": 4,
        }
    )
    out = tmp_path / "dec.csv"
    summary = run_intersection_decomposition(cfg, out, oracle=oracle5)
    assert summary["pairs"] == 400
    assert summary["excluded"] == 0
    assert summary["conditioned_pairs"] > 0
    by_a = {row["a"]: row["weighted_median_outside_frac"] for row in summary["aggregates"]}
    # an unreachable level puts all mass outside; no level at all puts none
    assert by_a["0.01"] == 1.0
    assert by_a["inf"] == 0.0

    lines = out.read_text().splitlines()
    assert lines[0] == "# schema=intersection-decomposition/1"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 400
    for row in rows[:50]:
        z2 = int(row["zeta2"])
        assert int(row["inside_a_inf"]) == z2
        if z2 > 0:
            assert float(row["outside_frac_a_inf"]) == 0.0
            assert float(row["outside_frac_a_0.01"]) == 1.0

    # byte determinism of a rerun
    out2 = tmp_path / "dec2.csv"
    summary2 = run_intersection_decomposition(cfg, out2, oracle=oracle5)
    assert summary2 == summary
    assert out2.read_bytes() == out.read_bytes()


def test_run_intersection_decomposition_kind_check(tmp_path, oracle5):
    cfg = ExperimentConfig.from_json_dict({"kind": "range-intersection"})
    with pytest.raises(ValueError, match="does not match"):
        run_intersection_decomposition(cfg, tmp_path / "x.csv", oracle=oracle5)


def test_run_level_set_geometry(tmp_path, oracle5):
    cfg = ExperimentConfig.from_json_dict(
        {
            "kind": "level-set-geometry",
            "pairs": 300,
            "stop_radius": 10,
            "level_n": 1,
            "level_m": 1,
            "vol_min": 1,
            "seed": 6,
        }
    )
    out = tmp_path / "lsg.csv"
    summary = run_level_set_geometry(cfg, out, oracle=oracle5)
    assert summary["threshold"] == pytest.approx(1.0)  # vol_min = 1
    assert summary["conditioned_pairs"] > 0
    assert summary["capacity_errors"] == 0
    assert summary["median_capacity"] > 0
    assert 0.0 <= summary["frac_below_threshold"] <= 1.0
    assert abs(sum(summary["histogram"]["mass"]) - 1.0) < 1e-6

    lines = out.read_text().splitlines()
    assert lines[0] == "# schema=level-set-geometry/1"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 300
    n_caps = sum(1 for r in rows if r["capacity"])
    assert n_caps == summary["conditioned_pairs"]
    for r in rows:
        if r["capacity"]:
            assert int(r["volume"]) >= 1
            assert float(r["capacity"]) > 0


def test_run_range_intersection(tmp_path, oracle5):
    cfg = ExperimentConfig.from_json_dict(
        {"kind": "range-intersection", "pairs": 4000, "stop_radius": 25, "seed": 3}
    )
    out = tmp_path / "ri.csv"
    summary = run_range_intersection(cfg, out, oracle=oracle5)
    assert summary["ess"] == pytest.approx(4000.0)  # plain sampling
    assert summary["excluded"] == 0
    assert 0.0 < summary["alpha_hat"] <= 1.0
    assert 0.0 < summary["r_squared"] <= 1.0
    lo, hi = summary["exponent_window"]
    assert summary["alpha_in_window"] == (lo <= summary["alpha_hat"] <= hi)
    # both walks share the origin, so the ranges always meet
    assert summary["p_meet_direct"] == 1.0
    assert summary["p_volume_ge_1"] == 1.0
    assert out.exists() and out.with_suffix(".json").exists()


def test_ess_gate_trips(tmp_path, oracle5):
    cfg = ExperimentConfig.from_json_dict(
        {
            "kind": "range-intersection",
            "pairs": 60,
            "stop_radius": 10,
            "theta": 0.85,
            "return_target": 30,
            "seed": 5,
        }
    )
    with pytest.raises(NumericError, match="effective sample size too small"):
        run_range_intersection(cfg, tmp_path / "gate.csv", oracle=oracle5)
