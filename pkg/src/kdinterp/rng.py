"""SplitMix64 random stream and the weight initializer built on it.

SplitMix64 is chosen because its output at position ``k`` is a pure function
of ``seed + k * GAMMA``, which lets large blocks of draws be produced with
vectorized uint64 arithmetic while staying bit-identical to the scalar stream.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

_U64_GAMMA = np.uint64(GAMMA)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state once. Returns ``(output, new_state)``."""
    state = (state + GAMMA) & MASK64
    return _mix(state), state


def splitmix64(seed: int) -> int:
    """First output of a SplitMix64 stream seeded with ``seed``.

    Used to turn structured seeds (``seed ^ tag ^ index``) into well-mixed ones.
    """
    return splitmix64_next(seed & MASK64)[0]


class Rng64:
    """Mutable SplitMix64 stream."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        out, self.state = splitmix64_next(self.state)
        return out

    def u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a uint64 array (same values as ``n`` calls to next_u64)."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * _U64_GAMMA
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def uniform_f32(self) -> float:
        """One float in [0, 1) from the top 24 bits (exactly representable in float32)."""
        return (self.next_u64() >> 40) * (1.0 / (1 << 24))

    def uniform_array(self, n: int) -> np.ndarray:
        """``n`` float32 values in [0, 1)."""
        top = (self.u64_array(n) >> np.uint64(40)).astype(np.float64)
        return (top * (1.0 / (1 << 24))).astype(np.float32)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.uniform_f32()

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        return int(self.uniform_f32() * n) % n

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of ``range(n)`` by stable argsort of ``n`` fresh u64 keys."""
        return np.argsort(self.u64_array(n), kind="stable")


def kaiming_uniform_init(rng: Rng64, fan_in: int, shape) -> np.ndarray:
    """Uniform values in [-sqrt(6/fan_in), +sqrt(6/fan_in)], float32."""
    if fan_in < 1:
        raise ParameterError("fan_in must be >= 1")
    shape = tuple(int(s) for s in shape)
    bound = math.sqrt(6.0 / fan_in)
    u = rng.uniform_array(int(np.prod(shape)) if shape else 1).astype(np.float64)
    return ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape)
