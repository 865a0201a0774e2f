"""Deterministic, order-independent random streams.

Analog noise draws must depend only on (seed, layer, tile_row, tile_col,
vector) — never on evaluation order — so that single-layer scans, bypass
ablations, and full runs all see the *same* noise at the same site.  Philox is
counter-based, which gives exactly that: we pack the site into the 256-bit
counter and leave word 0 free for the generator to advance through the draw.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_SALT = 0x9E3779B97F4A7C15  # keeps the noise key-space away from other uses


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 64-bit sub-seed for a named purpose (fixtures, training, ...)."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", seed & _MASK64))
    h.update(purpose.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def generator(seed: int, purpose: str) -> np.random.Generator:
    """General-purpose generator for a (seed, purpose) pair."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, purpose)))


@dataclass(frozen=True)
class NoiseSource:
    """Keyed gaussian noise for the analog accumulation path."""

    seed: int

    def _stream(self, layer: int, tile_row: int, tile_col: int, vector: int):
        for name, v, bound in (
            ("layer", layer, 1 << 64),
            ("tile_row", tile_row, 1 << 32),
            ("tile_col", tile_col, 1 << 32),
            ("vector", vector, 1 << 64),
        ):
            if not 0 <= v < bound:
                raise ValueError(f"{name} index {v} out of range")
        counter = (layer << 192) | (((tile_row << 32) | tile_col) << 128) | (vector << 64)
        key = (self.seed & _MASK64) | (_SALT << 64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def normal(self, layer: int, tile_row: int, tile_col: int, vector: int, count: int) -> np.ndarray:
        """`count` unit-variance gaussians for one MVP site (float64)."""
        return self._stream(layer, tile_row, tile_col, vector).normal(size=count)
