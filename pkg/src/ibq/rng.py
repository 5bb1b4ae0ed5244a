"""Platform-independent randomness built on SplitMix64.

NumPy's ``Generator`` methods carry no cross-version stream guarantee, so
everything that must be bit-reproducible (splits, shuffles, initial weights,
synthetic labels) draws from the counter-based SplitMix64 generator below.
A stream is identified by a 64-bit key; the i-th output of the stream is
``mix64(key + (i + 1) * GOLDEN)``, which vectorizes trivially.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (mod 2**64)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit key; order matters."""
    h = 0x6A09E667F3BCC909
    for p in parts:
        h = mix64(h ^ mix64((int(p) & MASK64) + GOLDEN))
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Stream:
    """Counter-based SplitMix64 stream.

    Successive calls advance an internal counter, so two streams built from
    the same key produce identical sequences of draws.
    """

    def __init__(self, key: int):
        self.key = int(key) & MASK64
        self.counter = 0

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.key) + idx * np.uint64(GOLDEN)
            return _mix64_array(state)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in the open interval (0, 1) from the top 53 bits."""
        top = (self.bits(n) >> np.uint64(11)).astype(np.float64)
        return (top + 0.5) * (1.0 / 9007199254740992.0)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``.

        Step ``i`` (from ``n-1`` down to 1) swaps position ``i`` with
        ``j = (u * (i + 1)) >> 53`` in exact integer arithmetic, where ``u`` is
        the top 53 bits of the next draw. The bias of this scaling is below
        2**-36 for any n under 2**17.
        """
        if n <= 1:
            return np.arange(n, dtype=np.int64)
        draws = (self.bits(n - 1) >> np.uint64(11)).tolist()
        perm = list(range(n))
        for i, u in zip(range(n - 1, 0, -1), draws):
            j = (u * (i + 1)) >> 53
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def truncated_normal(self, shape, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) truncated to +-bound*std, by inverse-CDF sampling."""
        n = int(np.prod(shape))
        lo = ndtr(-bound)
        u = lo + self.uniform(n) * (1.0 - 2.0 * lo)
        z = np.clip(ndtri(u), -bound, bound)
        return (std * z).reshape(shape)
