"""Reproducible random streams.

Every stochastic step in the toolkit draws from its own Philox4x64 stream
keyed by (seed, stream tag), where the tag is folded from small integers
(subject index, sample index, epoch, restart, ...).  Philox is counter
based, so streams are independent and a sample's draws do not depend on
how many draws other samples consumed -- parallel and serial generation
produce identical bytes.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_MIX = 0x9E3779B97F4A7C15


def _fold(tags):
    acc = 0x6A09E667F3BCC909
    for t in tags:
        acc = ((acc ^ (int(t) & _MASK64)) * _MIX) & _MASK64
    return acc


def stream(seed, *tags):
    """A numpy Generator on the Philox stream keyed by (seed, *tags)."""
    key = np.array([int(seed) & _MASK64, _fold(tags)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
