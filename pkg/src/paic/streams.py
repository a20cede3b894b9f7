"""Deterministic, label-keyed random streams.

Every random draw in a study comes from a generator keyed by
``(base_seed, dgm, iteration, purpose)``.  Keys are mixed by numpy's
``SeedSequence`` hash, so streams for distinct keys are independent and the
result of an iteration never depends on which worker ran it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PURPOSES = {
    "population": 0,
    "sampling": 1,
    "bootstrap": 2,
    "arm-assignment": 3,
    "outcome": 4,
    "calibration": 5,
    "truth": 6,
}


@dataclass(frozen=True)
class SeedContext:
    base_seed: int
    dgm: int
    iteration: int
    purpose: str

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown stream purpose {self.purpose!r}")
        if min(self.base_seed, self.dgm, self.iteration) < 0:
            raise ValueError("seed, dgm and iteration must be nonnegative")

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            self.base_seed,
            spawn_key=(self.dgm, self.iteration, PURPOSES[self.purpose]))


def derive_stream(ctx: SeedContext) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(ctx.seed_sequence()))


def derive_seed(ctx: SeedContext) -> int:
    """64-bit integer identifying the stream of ``ctx``."""
    return int(ctx.seed_sequence().generate_state(1, np.uint64)[0])


def replicate_stream(seed: int, replicate: int, part: int = 0) -> np.random.Generator:
    """Stream for bootstrap ``replicate`` under plan ``seed``.

    ``part`` separates draws made for different trials within one replicate.
    """
    ss = np.random.SeedSequence(seed, spawn_key=(replicate, part))
    return np.random.Generator(np.random.PCG64(ss))
