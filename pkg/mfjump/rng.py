"""
Counter-based random streams, one per (master seed, path, purpose).

Every path owns three Philox streams keyed by (master_seed, 4 * path_index + tag),
so the numbers a path sees never depend on which thread simulates it, on the
order paths are evaluated in, or on how many paths are simulated alongside it.

>>> a = path_generator(7, 3, BROWNIAN).standard_normal(2)
>>> b = path_generator(7, 3, BROWNIAN).standard_normal(2)
>>> bool((a == b).all())
True
>>> c = path_generator(7, 3, MARKS).standard_normal(2)
>>> bool((a == c).all())
False
"""

from dataclasses import dataclass

import numpy as np

BROWNIAN = 0
POISSON_COUNT = 1
MARKS = 2

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngConfig:
    """Identifies one path's noise: the master seed and the global path index."""
    master_seed: int
    path_index: int

    def __post_init__(self):
        if self.path_index < 0:
            raise ValueError(f"path index must be non-negative, got {self.path_index}")

    def generator(self, tag: int) -> np.random.Generator:
        return path_generator(self.master_seed, self.path_index, tag)


def path_generator(master_seed: int, path_index: int, tag: int) -> np.random.Generator:
    """
    Philox generator for one (seed, path, tag) triple.

    Args:
        master_seed (int): 64-bit master seed (reduced mod 2**64).
        path_index (int): Global, zero-based path index.
        tag (int): BROWNIAN, POISSON_COUNT or MARKS.

    Returns:
        np.random.Generator: A fresh generator positioned at counter zero.
    """
    key = np.array([int(master_seed) & _MASK64, (4 * int(path_index) + int(tag)) & _MASK64],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
