"""Seeded randomness and categorical sampling.

The generator is xoshiro256** seeded through SplitMix64, implemented on
Python integers masked to 64 bits, so streams are identical on every
platform.  Distributions are plain float64 probability vectors; sampling is
inverse-CDF over the fixed token ordering, which pins down exactly which
token any (seed, draw index) pair yields.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

DIST_SUM_TOL = 1e-9


def _mix64(x: int) -> int:
    """SplitMix64 output function for state x (one full step)."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed for run `index` (SplitMix64 double mix)."""
    a = _mix64(seed & _MASK)
    return _mix64(a ^ (((index + 1) * _GOLDEN) & _MASK))


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** stream with SplitMix64 state expansion from one seed."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        state = []
        s = seed & _MASK
        for _ in range(4):
            out = _mix64(s)
            state.append(out)
            s = (s + _GOLDEN) & _MASK
        if not any(state):
            state[3] = 1
        self._s = state

    def split(self, index: int) -> "Rng":
        return Rng(derive_seed(self._s[0], index))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def randint(self, n: int) -> int:
        """Integer in [0, n) (inverse-CDF over the uniform)."""
        if n <= 0:
            raise ValueError("randint needs n > 0")
        return min(int(self.uniform() * n), n - 1)

    def normal(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        """Box-Muller gaussian array, filled in row-major draw order."""
        count = int(np.prod(shape)) if shape else 1
        out = np.empty(max(count, 1), dtype=np.float64)
        i = 0
        while i < count:
            u1 = 1.0 - self.uniform()
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            i += 1
            if i < count:
                out[i] = r * math.sin(2.0 * math.pi * u2)
                i += 1
        return (out[:count] * std).reshape(shape)

    def shuffle(self, items: list) -> None:
        """Fisher-Yates, in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


# ---------------------------------------------------------------------------
# distributions


def check_dist(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("distribution must be a 1-D vector")
    if not np.isfinite(p).all() or (p < 0).any():
        raise ValueError("distribution entries must be finite and nonnegative")
    if abs(p.sum() - 1.0) > DIST_SUM_TOL:
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    return p


def dist_from_logits(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax of logits / temperature (max-subtracted).  Temperature 0 is a
    distinct greedy mode and is rejected here."""
    if not temperature > 0.0:
        raise ValueError("temperature must be > 0 for a sampling distribution")
    z = np.asarray(logits, dtype=np.float64) / float(temperature)
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def greedy_token(logits_or_probs: np.ndarray) -> int:
    """Argmax with the lowest-index tie break."""
    return int(np.argmax(logits_or_probs))


def sample(rng: Rng, probs: np.ndarray) -> int:
    """Inverse-CDF draw over the fixed token ordering."""
    p = check_dist(probs)
    cum = np.cumsum(p)
    u = rng.uniform() * cum[-1]
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= p.size:
        idx = p.size - 1
    # Guard float round-off: never land on a zero-probability token.
    while idx > 0 and p[idx] == 0.0:
        idx -= 1
    return idx


def residual(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Normalized positive part of (p - q): the rejection fallback.

    Degenerate when p equals q elementwise (nothing left to correct).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    r = np.maximum(p - q, 0.0)
    total = r.sum()
    if total <= 0.0:
        raise ValueError("residual is degenerate: p == q elementwise")
    return r / total
