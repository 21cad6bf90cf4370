"""Root-seed expansion into named, independent random streams.

Every stochastic stage (data, init, noise, sampling, ...) draws from its own
stream derived from the run's root seed, so any stage can be pinned or
replayed in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def seed_sequence(root_seed: int, label: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, _label_key(label)])


def derive_rng(root_seed: int, label: str) -> np.random.Generator:
    """Independent numpy generator for the given stage label."""
    return np.random.default_rng(seed_sequence(root_seed, label))


def derive_seed(root_seed: int, label: str) -> int:
    """Stable 63-bit integer seed (e.g. for torch generators)."""
    state = seed_sequence(root_seed, label).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
