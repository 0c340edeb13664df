"""Counter-based pseudo-random streams for reproducible replica ensembles.

Every stochastic routine in this package draws from a splittable family of
streams indexed by (seed, stream). Stream ``r`` of seed ``s`` is the sequence

    out_i = mix64(key(s, r) + (i + 1) * GOLDEN),   i = 0, 1, 2, ...

where ``mix64`` is the SplitMix64 finalizer (two multiply-xorshift avalanche
rounds) and GOLDEN is the 64-bit golden-ratio constant. Because the i-th
output is a pure function of (seed, stream, i), replicas can be generated in
any order, on any number of threads, with identical results.

The same constants are re-implemented inside the compiled kernels
(``_kernels.py``); ``tests/test_rng.py`` pins the two implementations to each
other.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_STREAM_SALT = np.uint64(0x5851F42D4C957F2D)

# 2**-53, the spacing of doubles in [1, 2)
_U53 = 1.0 / 9007199254740992.0


def mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    x = np.asarray(x, dtype=np.uint64).copy()
    x ^= x >> np.uint64(30)
    x *= _MIX_A
    x ^= x >> np.uint64(27)
    x *= _MIX_B
    x ^= x >> np.uint64(31)
    return x


def stream_key(seed: int, stream: int) -> int:
    """64-bit key of stream ``stream`` under ``seed``.

    Two full avalanche rounds decorrelate nearby (seed, stream) pairs.
    """
    s = np.array([seed], dtype=np.uint64)
    r = np.array([stream], dtype=np.uint64)
    key = mix64(mix64(s) ^ mix64(r ^ _STREAM_SALT))
    return int(key[0])


def counter_uints(key: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the stream with the given key."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    return mix64(np.uint64(key) + idx * GOLDEN)


def uniforms_from_uints(u: np.ndarray) -> np.ndarray:
    """Map uint64 draws to doubles in [0, 1) using the top 53 bits."""
    return (u >> np.uint64(11)).astype(np.float64) * _U53


class CounterStream:
    """Sequential view of one counter-based stream.

    Thin stateful wrapper used by the pure-Python walk simulator; the
    compiled kernels index the same streams directly by counter.
    """

    __slots__ = ("key", "counter")

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.key = stream_key(seed, stream)
        self.counter = counter

    def next_uints(self, count: int) -> np.ndarray:
        out = counter_uints(self.key, self.counter, count)
        self.counter += count
        return out

    def next_uniforms(self, count: int) -> np.ndarray:
        return uniforms_from_uints(self.next_uints(count))

    def next_below(self, bound: int, count: int) -> np.ndarray:
        """count draws uniform on {0, ..., bound-1}.

        Plain modulo reduction; for bound <= a few thousand the bias is
        below 1e-15 and irrelevant against Monte Carlo error.
        """
        return (self.next_uints(count) % np.uint64(bound)).astype(np.int64)
