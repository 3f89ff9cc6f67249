"""Counter-based splittable random streams.

Every stochastic routine takes an explicit generator (or derives one from an
integer key tuple), so runs are reproducible bit-for-bit and independent
(trial, machine, timestep) work items never share state. The Philox key is
derived from (seed, tag, trial, machine); the timestep selects a disjoint
2^64-draw block of the 256-bit counter. Streams for distinct key tuples or
distinct timesteps are therefore independent, and the values drawn at
(machine, t) never depend on scheduling or on how many draws other steps
consumed.
"""

from __future__ import annotations

import numpy as np

# Tags keep the key spaces of unrelated consumers disjoint.
TAG_ORACLE = 0       # per-step stochastic gradient oracles
TAG_SERVER = 1       # server-side batch queries (variance-reduced runners)
TAG_LOCAL = 2        # client-side local batch queries
TAG_CLIENT_PICK = 3  # uniform client selection
TAG_ADVERSARY = 4    # online loss sequences
TAG_PERTURB = 5      # bandit query directions
TAG_INSTANCE = 6     # problem generators
TAG_OUTPUT = 7       # output-point selection


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the Philox generator for key tuple ``(seed, *key)``.

    The same tuple always yields the same stream; different tuples yield
    independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1),
                                spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def oracle_stream(seed: int, trial: int, machine: int, t: int) -> np.random.Generator:
    """One-off stream for machine ``machine``'s oracle call at timestep ``t``.

    Equivalent to ``StepStream(seed, TAG_ORACLE, trial, machine).at(t)`` but
    creates a fresh bit generator; use StepStream inside step loops.
    """
    return StepStream(seed, TAG_ORACLE, trial, machine).at(t)


class StepStream:
    """Per-(key tuple) Philox stream addressed by timestep blocks.

    ``at(t)`` repositions the counter at block ``t`` and returns the wrapped
    generator; each block holds 2^64 draws, so draws at different timesteps
    can never overlap and revisiting a block replays it exactly.
    """

    def __init__(self, seed: int, *key: int):
        ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1),
                                    spawn_key=tuple(int(k) for k in key))
        self._bit = np.random.Philox(ss)
        self._gen = np.random.Generator(self._bit)
        state = self._bit.state
        self._key = state["state"]["key"].copy()
        self._template = state

    def at(self, t: int) -> np.random.Generator:
        counter = np.zeros(4, dtype=np.uint64)
        counter[1] = np.uint64(int(t) & ((1 << 64) - 1))
        st = self._template
        st["state"]["counter"] = counter
        st["state"]["key"] = self._key
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bit.state = st
        return self._gen
