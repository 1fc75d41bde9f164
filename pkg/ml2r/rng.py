"""
rng.py
------
Counter-based random streams.

Every draw belongs to a cell (seed, replication, level, chunk). A cell is keyed
into a Philox generator through a SeedSequence, so the values of a cell depend
only on its key and never on which worker or in which order it is consumed.
Gaussians come from the inverse normal CDF of the uniforms, one uniform per
Gaussian.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

CHUNK_SIZE = 1 << 14    # samples per stream cell; fixed so results do not depend on parallelism
_MANTISSA = 2.0 ** 53


@dataclass(frozen=True)
class StreamKey:
    seed: int
    replication: int = 0
    level: int = 0
    chunk: int = 0

    def __post_init__(self):
        for name in ("seed", "replication", "level", "chunk"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"Stream key field '{name}' must be a non-negative integer, got {value}")

    def with_(self, **changes) -> "StreamKey":
        return replace(self, **changes)

    def entropy(self) -> list[int]:
        return [int(self.seed), int(self.replication), int(self.level), int(self.chunk)]


class Stream:
    """Random stream for one key. Recreating a Stream from the same key replays it."""

    def __init__(self, key: StreamKey):
        self.key = key
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(key.entropy())))

    @classmethod
    def from_key(cls, seed: int, replication: int = 0, level: int = 0, chunk: int = 0) -> "Stream":
        return cls(StreamKey(seed, replication, level, chunk))

    def uniforms(self, shape) -> np.ndarray:
        """Uniforms strictly inside (0, 1) on the 2^-53 grid."""
        bits = self._gen.integers(0, 1 << 53, size=shape, dtype=np.int64)
        return (bits.astype(np.float64) + 0.5) / _MANTISSA

    def normals(self, shape) -> np.ndarray:
        return ndtri(self.uniforms(shape))

    def __repr__(self) -> str:
        k = self.key
        return f"Stream(seed={k.seed}, replication={k.replication}, level={k.level}, chunk={k.chunk})"


def chunk_bounds(total: int, chunk_size: int = CHUNK_SIZE) -> list[tuple[int, int]]:
    """(chunk index, size) pairs covering `total` samples."""
    if total < 0:
        raise ValueError(f"Sample count must be >= 0, got {total}")
    out = []
    start = 0
    index = 0
    while start < total:
        size = min(chunk_size, total - start)
        out.append((index, size))
        start += size
        index += 1
    return out
