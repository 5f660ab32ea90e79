"""Seeding policy: every random draw comes from a named Philox stream.

Philox is a 64-bit counter-based generator, so streams keyed by
(seed, purpose, ...) are deterministic across platforms and safe to create
independently in parallel workers. All modules obtain generators through
:func:`philox`; nothing uses global numpy random state.
"""

from __future__ import annotations

import numpy as np


def philox(*key: int) -> np.random.Generator:
    """A Generator on its own Philox stream, keyed by any tuple of ints."""
    seq = np.random.SeedSequence([int(k) for k in key])
    return np.random.Generator(np.random.Philox(seed=seq))
