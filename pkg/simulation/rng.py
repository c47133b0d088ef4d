"""
Seeded random streams.

Every consumer of randomness gets its own stream derived from the global
seed plus integer keys (round, participant id, purpose), so results do not
depend on call order or on how many workers run in parallel.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

# Purpose tags mixed into stream keys.
SELECTION = 1
LOCAL_TRAIN = 2
AGGREGATION = 3
PARTITION = 4
INIT = 5
BATCHES = 6
GRADCHECK = 7


@dataclass(frozen=True)
class RngStream:
    """An immutable stream identifier; `generator()` always restarts it."""

    key: Tuple[int, ...]

    @classmethod
    def root(cls, seed: int) -> "RngStream":
        return cls((int(seed),))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.key + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(list(self.key)))
