"""Counter-based random streams for reproducible ensemble simulation.

All randomness is drawn from Philox blocks addressed by
``(key, phase, step, round)``.  The key is ``(base seed, stream id)``, where
the stream id separates replicate experiments.  The 256-bit Philox counter is
laid out as ``[draw, round, step, phase]``, so every (phase, step, round)
triple owns a disjoint counter range of 2**64 draws.  Because a block is
always generated for the full ensemble, the variates seen by path ``j`` are a
function of ``(key, phase, step, round, j)`` only: whether some other path
needed a redraw, or in which order paths are processed, has no effect.

Phases:

* ``PHASE_INIT`` initial-condition sampling (rejection batches count as steps)
* ``PHASE_EVOLVE`` time stepping (step = global inner-step index, round =
  accept/reject redraw round)
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

PHASE_INIT = 1
PHASE_EVOLVE = 2

_U64 = np.uint64


@dataclass(frozen=True)
class SeedLineage:
    """Everything needed to reproduce the random draws of an ensemble.

    ``seed`` and ``stream`` form the Philox key; ``step`` is the global
    inner-step counter, advanced once per microscopic time step.
    """

    seed: int
    stream: int = 0
    step: int = 0

    def key(self) -> tuple[int, int]:
        return (int(self.seed) & 0xFFFFFFFFFFFFFFFF,
                int(self.stream) & 0xFFFFFFFFFFFFFFFF)

    def advanced(self, nsteps: int) -> "SeedLineage":
        return replace(self, step=self.step + int(nsteps))

    def with_stream(self, stream: int) -> "SeedLineage":
        return replace(self, stream=stream, step=0)


def block_generator(key: tuple[int, int], phase: int, step: int,
                    rnd: int = 0) -> np.random.Generator:
    """Generator positioned at the start of one (phase, step, round) block."""
    counter = np.array([0, rnd, step, phase], dtype=_U64)
    bitgen = np.random.Philox(counter=counter, key=np.array(key, dtype=_U64))
    return np.random.Generator(bitgen)


def normal_block(key: tuple[int, int], phase: int, step: int, rnd: int,
                 shape) -> np.ndarray:
    """Standard-normal variates for one counter block."""
    return block_generator(key, phase, step, rnd).standard_normal(shape)
