"""Seeded random streams.

The generator is xoshiro256** (Blackman & Vigna) whose 256-bit state is
filled from four consecutive outputs of splitmix64 started at the 64-bit
seed. Constants, for anyone porting the stream:

    splitmix64:  x += 0x9E3779B97F4A7C15
                 z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
                 z = (z ^ (z >> 27)) * 0x94D049BB133111EB
                 return z ^ (z >> 31)

    xoshiro256**: result = rotl(s1 * 5, 7) * 9
                  t = s1 << 17
                  s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
                  s2 ^= t;  s3 = rotl(s3, 45)

Derived draws:

    uniform   (u64 >> 11) * 2**-53, in [0, 1)
    normal    Box-Muller on two uniforms, u1 mapped to (0, 1] as 1 - u;
              both the cosine and sine outputs are used, in that order
    trunc     normal redrawn until |z| <= bound
    below(n)  rejection sampling: draw r until r >= (2**64 - n) mod n,
              return r mod n
    shuffle   Fisher-Yates from the last index down

The u64 stream is identical on every platform. Float draws go through libm
``log``/``cos``/``sin`` and may differ in the last ulp between libm builds.
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint64

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


@njit(cache=True)
def _rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@njit(cache=True)
def _splitmix_fill(seed, out):
    x = uint64(seed)
    for i in range(out.shape[0]):
        x = x + uint64(0x9E3779B97F4A7C15)
        z = x
        z = (z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB)
        out[i] = z ^ (z >> uint64(31))


@njit(cache=True)
def _next(s):
    result = _rotl(s[1] * uint64(5), 7) * uint64(9)
    t = s[1] << uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _next(s)


@njit(cache=True)
def _uniform(s):
    return float(_next(s) >> uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _fill_uniform(s, out):
    for i in range(out.shape[0]):
        out[i] = _uniform(s)


@njit(cache=True)
def _fill_normal(s, out, bound):
    # bound <= 0 disables truncation
    n = out.shape[0]
    i = 0
    while i < n:
        u1 = 1.0 - _uniform(s)
        u2 = _uniform(s)
        r = np.sqrt(-2.0 * np.log(u1))
        z0 = r * np.cos(2.0 * np.pi * u2)
        z1 = r * np.sin(2.0 * np.pi * u2)
        if bound <= 0.0 or abs(z0) <= bound:
            out[i] = z0
            i += 1
        if i < n and (bound <= 0.0 or abs(z1) <= bound):
            out[i] = z1
            i += 1


@njit(cache=True)
def _below(s, n):
    n64 = uint64(n)
    threshold = (uint64(0) - n64) % n64
    while True:
        r = _next(s)
        if r >= threshold:
            return r % n64


@njit(cache=True)
def _shuffle(s, arr):
    for i in range(arr.shape[0] - 1, 0, -1):
        j = _below(s, i + 1)
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (pure Python, for seed mixing)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for an indexed sub-stream: fold each key through splitmix64."""
    x = seed & _MASK64
    for k in keys:
        x = splitmix64(x ^ splitmix64(k & _MASK64))
    return x


class Rng:
    """Deterministic xoshiro256** stream seeded through splitmix64."""

    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed) & _MASK64
        self._s = np.zeros(4, dtype=np.uint64)
        _splitmix_fill(np.uint64(self.seed), self._s)

    def spawn(self, *keys: int) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))

    def next_u64(self) -> int:
        out = np.empty(1, dtype=np.uint64)
        _fill_u64(self._s, out)
        return int(out[0])

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def uniform(self, shape) -> np.ndarray:
        out = np.empty(int(np.prod(shape, dtype=np.int64)), dtype=np.float64)
        _fill_uniform(self._s, out)
        return out.reshape(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        out = np.empty(int(np.prod(shape, dtype=np.int64)), dtype=np.float64)
        _fill_normal(self._s, out, 0.0)
        return (out * std).reshape(shape)

    def truncated_normal(self, shape, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal draws with |z| <= bound (in units of std), redrawn on rejection."""
        out = np.empty(int(np.prod(shape, dtype=np.int64)), dtype=np.float64)
        _fill_normal(self._s, out, float(bound))
        return (out * std).reshape(shape)

    def below(self, n: int) -> int:
        if n < 1:
            raise ValueError("below() needs n >= 1")
        return int(_below(self._s, n))

    def permutation(self, n: int) -> np.ndarray:
        arr = np.arange(n, dtype=np.int64)
        _shuffle(self._s, arr)
        return arr

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct values from range(n), uniformly, in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        arr = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.below(n - i)
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:k].copy()
