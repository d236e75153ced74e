"""Seeded random streams used everywhere randomness is needed.

A single stream type backs weight generation, mask/noise synthesis and
benchmark seeding so that every artifact is a pure function of (inputs,
seed) on any platform. The generator is xoshiro256** seeded through
splitmix64; normals come from Box-Muller. Large i.i.d. fields are expanded
from a single stream-drawn 64-bit key via the splitmix64 sequence, which
keeps bulk generation vectorized without changing the stream contract.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Poisson sampling switches from CDF inversion to transformed rejection
# at this mean (inversion degrades for large means, PTRS requires >= 10).
_POISSON_PTRS_CUTOFF = 10.0


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Stream:
    """xoshiro256** stream, state seeded from a u64 via splitmix64."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def u64s(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        draw = self.next_u64
        for i in range(n):
            out[i] = draw()
        return out

    def uniform(self) -> float:
        # 53 high bits -> [0, 1)
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        return (self.u64s(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller; consumes ceil(n/2) uniform pairs."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        z = _box_muller(u[0::2], u[1::2])
        return z[:n]

    def normal_pair(self) -> tuple[float, float]:
        z = self.normals(2)
        return float(z[0]), float(z[1])

    def index(self, bound: int) -> int:
        """Uniform integer in [0, bound) by 128-bit multiply-shift."""
        if bound <= 0:
            raise ValueError(f"index bound must be positive, got {bound}")
        return (self.next_u64() * bound) >> 64

    def spawn_key(self) -> int:
        """Draw a u64 key for expanding a bulk field (see keyed_* helpers)."""
        return self.next_u64()


def _box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    # 1-u1 lies in (0, 1], keeping the log finite for u1 == 0.
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    theta = 2.0 * np.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)]).reshape(2, -1).T.reshape(-1)


def keyed_u64s(key: int, n: int) -> np.ndarray:
    """First n outputs of the splitmix64 sequence seeded with key, vectorized."""
    counters = (np.uint64(key) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN))
    z = counters
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def keyed_uniforms(key: int, n: int) -> np.ndarray:
    return (keyed_u64s(key, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def keyed_normals(key: int, n: int) -> np.ndarray:
    pairs = (n + 1) // 2
    u = keyed_uniforms(key, 2 * pairs)
    return _box_muller(u[0::2], u[1::2])[:n]


def normal_field(stream: Stream, shape: tuple[int, ...]) -> np.ndarray:
    """i.i.d. standard-normal field keyed off one stream draw."""
    n = int(np.prod(shape)) if shape else 1
    return keyed_normals(stream.spawn_key(), n).reshape(shape)


def uniform_field(stream: Stream, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    return keyed_uniforms(stream.spawn_key(), n).reshape(shape)


def bernoulli_field(stream: Stream, p: float, shape: tuple[int, ...]) -> np.ndarray:
    """Boolean field, True with probability p."""
    return uniform_field(stream, shape) < p


def poisson_field(stream: Stream, lam: np.ndarray) -> np.ndarray:
    """Poisson draws with per-element means.

    CDF inversion below mean 10, PTRS transformed rejection above, both
    consuming keyed bulk uniforms so the result is a deterministic function
    of the stream state on entry.
    """
    lam = np.asarray(lam, dtype=np.float64)
    flat = lam.reshape(-1)
    if np.any(flat < 0) or not np.all(np.isfinite(flat)):
        raise ValueError("poisson means must be finite and non-negative")
    out = np.zeros(flat.shape, dtype=np.int64)

    small = flat < _POISSON_PTRS_CUTOFF
    if np.any(small):
        out[small] = _poisson_inversion(stream, flat[small])
    large = ~small
    if np.any(large):
        out[large] = _poisson_ptrs(stream, flat[large])
    return out.reshape(lam.shape)


def _poisson_inversion(stream: Stream, lam: np.ndarray) -> np.ndarray:
    n = lam.size
    u = keyed_uniforms(stream.spawn_key(), n)
    pmf = np.exp(-lam)
    cdf = pmf.copy()
    k = np.zeros(n, dtype=np.int64)
    active = u >= cdf
    # tail beyond k ~ 200 is negligible for lam < 10
    for step in range(1, 200):
        if not active.any():
            break
        k[active] += 1
        pmf[active] *= lam[active] / step
        cdf[active] += pmf[active]
        active &= u >= cdf
    return k


def _poisson_ptrs(stream: Stream, lam: np.ndarray) -> np.ndarray:
    n = lam.size
    b = 0.931 + 2.53 * np.sqrt(lam)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    log_lam = np.log(lam)

    out = np.zeros(n, dtype=np.int64)
    todo = np.arange(n)
    while todo.size:
        m = todo.size
        u = keyed_uniforms(stream.spawn_key(), m) - 0.5
        v = keyed_uniforms(stream.spawn_key(), m)
        li = lam[todo]
        bi = b[todo]
        ai = a[todo]
        us = 0.5 - np.abs(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.floor((2.0 * ai / us + bi) * u + li + 0.43)
            fast = (us >= 0.07) & (v <= v_r[todo])
            bail = (k < 0) | ((us < 0.013) & (v > us))
            lhs = np.log(v * inv_alpha[todo] / (ai / (us * us) + bi))
            rhs = k * log_lam[todo] - li - gammaln(k + 1.0)
            accept = fast | (~bail & (lhs <= rhs))
        acc_idx = todo[accept]
        out[acc_idx] = k[accept].astype(np.int64)
        todo = todo[~accept]
    return out
