"""
Seedable pseudo-random streams.

Algorithm: xoshiro256** run as ``LANES`` independent lanes advanced in lock step.
Lane states are filled from one splitmix64 sequence started at the seed: lane ``l``
takes outputs ``4l .. 4l+3`` as (s0, s1, s2, s3). A request for ``n`` values advances
all lanes ``ceil(n / LANES)`` times and reads the outputs step-major (step 0 lanes
0..LANES-1, then step 1, ...); values beyond ``n`` in the last step are discarded.
Floats use the top 53 bits: ``(u >> 11) · 2**-53``.
"""
import logging
import zlib

import numpy as np

logger = logging.getLogger("lic-quant.engine.prng")

LANES = 256
_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(seed: int, count: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + np.arange(1, count + 1, dtype=np.uint64) * _GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


def derive_seed(seed: int, *labels: str | int) -> int:
    """
    Derive an independent child seed from a parent seed and a sequence of labels.

    :param int seed: Parent seed.
    :param labels: Stream labels, e.g. ("train", 3).
    :return: A 64-bit child seed.
    :rtype: int
    """
    state = seed & _MASK64
    for label in labels:
        state = int(_splitmix64(state ^ zlib.crc32(str(label).encode("utf-8")), 1)[0])
    return state


class Xoshiro256:
    """Lane-parallel xoshiro256** generator seeded by splitmix64."""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK64
        words = _splitmix64(self.seed, 4 * LANES).reshape(LANES, 4)
        self._s = [words[:, i].copy() for i in range(4)]

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s = [s0, s1, s2, _rotl(s3, 45)]
        return result

    def next_u64(self, n: int) -> np.ndarray:
        """Returns the next ``n`` raw 64-bit outputs."""
        steps = -(-n // LANES)
        if steps == 0:
            return np.zeros(0, dtype=np.uint64)
        return np.concatenate([self._step() for _ in range(steps)])[:n]

    def random(self, shape: tuple[int, ...] | int) -> np.ndarray:
        """Uniform float64 samples in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        return ((self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(shape)

    def uniform(self, shape: tuple[int, ...] | int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return lo + (hi - lo) * self.random(shape)

    def normal(self, shape: tuple[int, ...] | int) -> np.ndarray:
        """Standard normal samples by the Box-Muller transform (one pair per two uniforms)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        half = -(-n // 2)
        u1 = 1.0 - self.random(half)
        u2 = self.random(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        samples = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
        return samples[:n].reshape(shape)

    def integers(self, high: int, size: int) -> np.ndarray:
        """Integers in [0, high) by scaling 53-bit uniforms."""
        if high < 1:
            raise ValueError(f"high must be >= 1, got {high}")
        return np.floor(self.random(size) * high).astype(np.int64)
