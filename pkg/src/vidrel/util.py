"""Small shared helpers: seed derivation and canonical JSON."""

from __future__ import annotations

import json

import numpy as np


def derive_seed(*parts: int) -> int:
    """Mix integer parts into one well-spread 63-bit seed.

    Distinct part tuples give independent streams; the same tuple always
    gives the same seed.
    """
    state = np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))  # keep it positive in signed 64-bit


def canonical_json(obj) -> str:
    """Stable single-line JSON for fingerprinting and file headers."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
