"""Counter-based Gaussian noise streams.

Every Gaussian block is a pure function of ``(seed, replication, step, channel)``:
a Philox bit generator is keyed by ``(seed, replication)`` and its counter is set to
``(0, 0, step, channel)``. Draws only advance the lowest counter word, so blocks for
different steps or channels never overlap. Particle ``i`` always reads row ``i`` of
its block, which keeps results independent of how work is split across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

_MASK64 = (1 << 64) - 1


class Channel(IntEnum):
    SLOW = 0
    FAST = 1
    FLOW = 2
    TAGGED = 3
    COMPANION_SLOW = 4
    COMPANION_FAST = 5
    INIT = 6
    PROBE = 7
    BOOTSTRAP = 8


def derive_seed(seed: int, *words: int) -> int:
    """Spawn a 64-bit child seed from ``seed`` and extra integer words."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, *[int(w) & _MASK64 for w in words]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class NoiseStream:
    seed: int
    replication: int = 0

    def _generator(self, step: int, channel: int) -> np.random.Generator:
        key = np.array([int(self.seed) & _MASK64, int(self.replication) & _MASK64], dtype=np.uint64)
        counter = np.array([0, 0, int(step) & _MASK64, int(channel) & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def normals(self, step: int, shape: tuple[int, ...], channel: int = Channel.SLOW) -> np.ndarray:
        """Standard normal block for ``(step, channel)``."""
        return self._generator(step, channel).standard_normal(shape)

    def increments(self, step: int, n_particles: int, dim: int, dt: float, channel: int) -> np.ndarray:
        """Brownian increments ``N(0, dt I)`` of shape ``(n_particles, dim)``."""
        if dim == 0:
            return np.zeros((n_particles, 0))
        return np.sqrt(dt) * self.normals(step, (n_particles, dim), channel)

    def generator(self, channel: int, step: int = 0) -> np.random.Generator:
        """A free-running generator for non-stepped draws (initial states, probes)."""
        return self._generator(step, channel)

    def child(self, replication: int) -> "NoiseStream":
        return NoiseStream(self.seed, replication)
