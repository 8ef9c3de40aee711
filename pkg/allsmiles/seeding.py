"""
Seeded random streams
One 64-bit seed fans out into independent, reproducible generators.
"""

from typing import Sequence

import numpy as np


def generator(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for (seed, stream...); distinct streams never overlap"""
    sequence = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                      spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


def child_seeds(seed: int, count: int) -> Sequence[int]:
    """Deterministic 63-bit seeds for `count` independent workers"""
    sequence = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF)
    return [int(child.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))
            for child in sequence.spawn(count)]
