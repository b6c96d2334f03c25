"""xoshiro256++ generator with named streams and Box-Muller normals.

Written out by hand (numpy ships no xoshiro256++) so that ports in other
languages can reproduce the exact bit streams:

* state seeding: four successive splitmix64 outputs from
  ``seed ^ (0x9E3779B97F4A7C15 * (stream_id + 1))``
* uniform double: ``(next() >> 11) * 2**-53``
* normals: Box-Muller on pairs ``(u1, u2)``, emitting ``r*cos`` then ``r*sin``
  with ``r = sqrt(-2 ln(1 - u1))``, ``theta = 2 pi u2``
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

MASK64 = (1 << 64) - 1

STREAMS = {"init": 0, "windows": 1, "eps": 2, "synth": 3, "split": 4, "misc": 5}


def splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _fill_py(s: list[int], n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.uint64)
    s0, s1, s2, s3 = s
    for i in range(n):
        out[i] = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    s[:] = [s0, s1, s2, s3]
    return out


if njit is not None:

    @njit(cache=True)
    def _fill_nb(state, n):  # pragma: no cover - compiled
        out = np.empty(n, dtype=np.uint64)
        s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
        for i in range(n):
            a = s0 + s3
            out[i] = ((a << np.uint64(23)) | (a >> np.uint64(41))) + s0
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        state[0], state[1], state[2], state[3] = s0, s1, s2, s3
        return out
else:  # pragma: no cover
    _fill_nb = None

# below this many draws the compiled kernel is not worth the call overhead
_NB_THRESHOLD = 64


class Xoshiro256pp:
    """One xoshiro256++ stream."""

    def __init__(self, seed: int, stream: int | str = 0):
        sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
        x = (int(seed) ^ ((0x9E3779B97F4A7C15 * (sid + 1)) & MASK64)) & MASK64
        st = []
        for _ in range(4):
            x, z = splitmix64(x)
            st.append(z)
        if not any(st):
            st[0] = 1
        self._s = st

    @property
    def state(self) -> tuple[int, ...]:
        return tuple(self._s)

    def next_u64(self) -> int:
        return int(self.raw(1)[0])

    def raw(self, n: int) -> np.ndarray:
        if _fill_nb is not None and n >= _NB_THRESHOLD:
            arr = np.array(self._s, dtype=np.uint64)
            out = _fill_nb(arr, n)
            self._s = [int(v) for v in arr]
            return out
        return _fill_py(self._s, n)

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        th = 2.0 * math.pi * u[:, 1]
        z = np.empty((m, 2))
        z[:, 0] = r * np.cos(th)
        z[:, 1] = r * np.sin(th)
        z = z.reshape(-1)[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in the closed range [low, high]."""
        if high < low:
            raise ValueError(f"empty integer range [{low}, {high}]")
        span = high - low + 1
        u = self.uniform(1 if size is None else size)
        v = low + np.minimum(np.floor(np.asarray(u) * span), span - 1).astype(np.int64)
        return int(v.reshape(-1)[0]) if size is None else v

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        p = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i)
            p[i], p[j] = p[j], p[i]
        return p


def stream(seed: int, purpose: str) -> Xoshiro256pp:
    return Xoshiro256pp(seed, purpose)
