"""Counter-based deterministic random numbers.

The generator is a pure function of (key, counter): drawing the i-th value
never depends on how many values were drawn before it, so substreams can be
derived for problems / sequences / answers without coordinating consumption
order.  Output is reproducible bit-for-bit across platforms because all
arithmetic is 64-bit modular integer work.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1

# splitmix64 constants (Steele, Lea & Flood 2014).  GOLDEN is the 64-bit
# golden-ratio increment; MIX1/MIX2 are the finalizer multipliers.
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_INV_2_53 = 2.0 ** -53


def mix64(x: int) -> int:
    """splitmix64 finalizer: bijective avalanche on 64-bit ints."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


class CounterRng:
    """splitmix64 stream: value(i) = mix64(key + (i+1) * GOLDEN).

    `key` is itself derived from the user seed by one mix64 round so that
    small seeds (0, 1, 2, ...) land far apart in the state space.
    """

    def __init__(self, seed: int, key: int | None = None):
        self.seed = seed
        self.key = mix64(seed & _MASK64) if key is None else key & _MASK64
        self.counter = 0

    def derive(self, index: int) -> "CounterRng":
        """Independent child stream; children of distinct indices never collide."""
        child = mix64(self.key ^ mix64(((index + 1) * GOLDEN) & _MASK64))
        return CounterRng(self.seed, key=child)

    def _value(self, i: int) -> int:
        return mix64((self.key + ((i + 1) * GOLDEN)) & _MASK64)

    def next_u64(self) -> int:
        out = self._value(self.counter)
        self.counter += 1
        return out

    def u01(self) -> float:
        """Uniform in [0, 1): top 53 bits scaled by 2^-53."""
        return (self.next_u64() >> 11) * _INV_2_53

    def normal(self) -> float:
        """One N(0,1) draw via Box-Muller (cosine branch), two uniforms per call.

        u1 is shifted into (0, 1] so log(u1) is always finite.
        """
        u1 = ((self.next_u64() >> 11) + 1) * _INV_2_53
        u2 = self.u01()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform int in [0, n) by rejection-free multiply-shift on 64 bits.

        Bias is < n / 2^64, negligible for the desk-scale n used here.
        """
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return (self.next_u64() * n) >> 64

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items: list):
        return items[self.randint(len(items))]

    # Vectorized helpers mirror the scalar path exactly: normals(k) consumes
    # the same counters as k scalar normal() calls.

    def _values_np(self, count: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        x = np.uint64(self.key) + idx * np.uint64(GOLDEN)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
        x ^= x >> np.uint64(31)
        self.counter += count
        return x

    def u01s(self, count: int) -> np.ndarray:
        return (self._values_np(count) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normals(self, count: int) -> np.ndarray:
        raw = self._values_np(2 * count)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
