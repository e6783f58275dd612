"""Deterministic seed derivation.

Every source of randomness in the package flows from one master seed.
Sub-streams (per tree, per run, per method, per fold) are derived with
`derive_seed`, a splitmix64-based 64-bit mix over the master seed and a
sequence of labels, so results are identical regardless of execution
order or worker scheduling.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


def _label_to_int(label: int | str) -> int:
    if isinstance(label, int):
        return label & _MASK
    # Stable across processes and platforms, unlike hash().
    out = 0
    for byte in label.encode("utf-8"):
        out = (out * 131 + byte) & _MASK
    return out


def derive_seed(master: int, *labels: int | str) -> int:
    """Mix a master seed with a sequence of labels into a new 64-bit seed.

    Args:
        master: Master seed.
        labels: Integers or strings identifying the sub-stream
            (e.g. tree index, "crossfit", run index, method name).

    Returns:
        A 64-bit integer seed, deterministic in (master, labels).
    """
    state = _splitmix64(master & _MASK)
    for label in labels:
        state = _splitmix64(state ^ _label_to_int(label))
    return state


def rng_from(master: int, *labels: int | str) -> np.random.Generator:
    """Return a numpy Generator seeded by `derive_seed(master, *labels)`."""
    return np.random.default_rng(derive_seed(master, *labels))
