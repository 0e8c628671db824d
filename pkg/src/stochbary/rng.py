"""Deterministic keyed random streams.

Every random draw in the package comes from a :class:`Stream`, which is a
root seed plus a tuple of integer keys. A stream is turned into a counter-based
Philox generator via :class:`numpy.random.SeedSequence`. Two streams with the
same seed and keys produce identical numbers regardless of which process or
thread asks for them, which is what lets serial and distributed runs agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    """First key of a stream, naming what the draws are used for."""

    PROBE = 1  # truncation-radius probes
    SOURCE = 2  # samples of the current iterate fed to the estimators
    TARGET = 3  # samples of the input measures fed to the estimators
    EVAL = 4  # evaluation samples (never perturbs the iteration stream)
    INSTANCE = 5  # instance construction
    DIAGNOSTIC = 6  # Monte-Carlo diagnostics
    MISC = 7


@dataclass(frozen=True)
class Stream:
    """A reproducible random stream identified by ``(seed, keys)``.

    Parameters
    ----------
    seed : int
        Non-negative root seed.
    keys : tuple of int
        Path of the substream below the root.
    """

    seed: int
    keys: tuple[int, ...] = ()

    def __post_init__(self):
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")
        if any(int(k) < 0 for k in self.keys):
            raise ValueError("stream keys must be non-negative")

    def child(self, *keys: int) -> "Stream":
        """Substream obtained by appending ``keys``."""
        return Stream(self.seed, self.keys + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(int(self.seed), spawn_key=self.keys)
        return np.random.Generator(np.random.Philox(seq))

    def provenance(self) -> dict:
        return {"seed": int(self.seed), "keys": list(self.keys)}


def as_stream(stream: "Stream | int") -> Stream:
    """Accept either a :class:`Stream` or a bare integer seed."""
    if isinstance(stream, Stream):
        return stream
    return Stream(int(stream))
