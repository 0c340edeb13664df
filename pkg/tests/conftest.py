"""Shared fixtures: cached Green oracles and hypothesis defaults."""

from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from walklab import GreenOracle, green_box_solve

settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

_CACHE = Path(__file__).parent / "_cache"


def _cached_oracle(dim: int, box_radius: int) -> GreenOracle:
    _CACHE.mkdir(exist_ok=True)
    path = _CACHE / f"green-d{dim}-b{box_radius}.npz"
    if path.exists():
        oracle = GreenOracle.load(path)
        if oracle.dim == dim and oracle.box_radius == box_radius:
            return oracle
    oracle = green_box_solve(dim, box_radius)
    oracle.save(path)
    return oracle


@pytest.fixture(scope="session")
def oracle5() -> GreenOracle:
    """The workhorse d=5 oracle, box radius 40 (about 20 s to build cold)."""
    return _cached_oracle(5, 40)


@pytest.fixture(scope="session")
def oracle5_small() -> GreenOracle:
    return _cached_oracle(5, 12)


@pytest.fixture(scope="session")
def oracle3() -> GreenOracle:
    return _cached_oracle(3, 30)
