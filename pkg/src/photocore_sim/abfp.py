"""Adaptive block-floating-point quantization.

The converter grid is symmetric: b bits give integer levels in [-D, D] with
D = 2^(b-1) - 1.  Quantization of x under a scale S is

    q = clip(round(x / S * D), -D, D)

with round-half-away-from-zero.  Scales are per weight-tile row / per input
vector chunk, equal to the max magnitude of the block, and are themselves
rounded to bfloat16 *before* use so the dequantized product can be rebuilt
bit-for-bit from stored scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import bf16_round


@dataclass(frozen=True)
class QuantParams:
    """Bit-width of a symmetric signed converter."""

    bits: int

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError("a symmetric quantizer needs at least 2 bits")

    @property
    def max_level(self) -> int:
        return 2 ** (self.bits - 1) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """round() with .5 going away from zero (banker-free), elementwise."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(x, scale: float, params: QuantParams) -> np.ndarray:
    """Map values to integer levels under `scale`; see module docstring.

    scale == 0 is only legal when the block is identically zero (it then
    quantizes to zeros).  Returns int64.
    """
    x = np.asarray(x, dtype=np.float64)
    if scale < 0:
        raise ValueError("scale must be non-negative")
    if scale == 0.0:
        if np.any(x != 0):
            raise ValueError("zero scale with nonzero values")
        return np.zeros(x.shape, dtype=np.int64)
    d = params.max_level
    q = round_half_away(x / scale * d)
    return np.clip(q, -d, d).astype(np.int64)


def dequantize(q, scale: float, params: QuantParams) -> np.ndarray:
    """Pull integer levels back to real values: q / D * S (float64)."""
    return np.asarray(q, dtype=np.float64) / params.max_level * scale


def per_tensor_scale(values) -> float:
    """Single whole-tensor scale (the non-adaptive baseline): bf16(max |x|)."""
    values = np.asarray(values, dtype=np.float32)
    if values.size == 0:
        raise ValueError("cannot scale an empty block")
    return bf16_round(np.max(np.abs(values)))


def extract_row_scales(tile) -> np.ndarray:
    """Per-row max-magnitude scales of a 2-d tile, bf16-rounded (float32)."""
    tile = np.asarray(tile, dtype=np.float32)
    if tile.ndim != 2:
        raise ValueError("row scales are defined for 2-d tiles")
    return bf16_round(np.max(np.abs(tile), axis=1))


@dataclass(frozen=True)
class QuantizedTile:
    """An integer weight tile plus the per-row scales that reconstruct it."""

    levels: np.ndarray  # (rows, cols) int64 in [-D, D]
    row_scales: np.ndarray  # (rows,) float32, bf16-exact, >= 0
    params: QuantParams

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.int64)
        scales = np.asarray(self.row_scales, dtype=np.float32)
        if levels.ndim != 2 or scales.shape != (levels.shape[0],):
            raise ValueError("tile/scale shapes disagree")
        d = self.params.max_level
        if np.abs(levels).max(initial=0) > d:
            raise ValueError(f"tile levels exceed +/-{d}")
        if np.any(scales < 0):
            raise ValueError("negative row scale")
        if np.any((scales == 0) & np.any(levels != 0, axis=1)):
            raise ValueError("zero-scale row with nonzero levels")
        levels.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "row_scales", scales)

    @property
    def shape(self) -> tuple[int, int]:
        return self.levels.shape


@dataclass(frozen=True)
class QuantizedVector:
    """An integer input chunk plus its single scale."""

    levels: np.ndarray  # (n,) int64 in [-D, D]
    scale: float  # bf16-exact, >= 0
    params: QuantParams

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.int64)
        if levels.ndim != 1:
            raise ValueError("quantized vector must be 1-d")
        d = self.params.max_level
        if np.abs(levels).max(initial=0) > d:
            raise ValueError(f"vector levels exceed +/-{d}")
        if self.scale < 0 or (self.scale == 0 and np.any(levels != 0)):
            raise ValueError("bad vector scale")
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "scale", float(self.scale))


def _quantize_rows(block: np.ndarray, scales: np.ndarray, params: QuantParams) -> np.ndarray:
    """Row-wise quantize with per-row scales; zero-scale rows come out zero."""
    block = np.asarray(block, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    d = params.max_level
    safe = np.where(scales > 0, scales, 1.0)[:, None]
    q = round_half_away(block / safe * d)
    q = np.clip(q, -d, d).astype(np.int64)
    q[scales == 0] = 0
    return q


def quantize_tile(tile, params: QuantParams, scale_value: float | None = None) -> QuantizedTile:
    """Quantize a 2-d weight tile row-adaptively.

    With scale_value given, every row uses that one (pre-rounded) scale
    instead — the per-tensor ablation path.
    """
    tile = np.asarray(tile, dtype=np.float32)
    if tile.ndim != 2:
        raise ValueError("weight tiles are 2-d")
    if scale_value is None:
        scales = extract_row_scales(tile)
    else:
        scales = np.full(tile.shape[0], np.float32(scale_value), dtype=np.float32)
        if scale_value == 0.0 and np.any(tile != 0):
            raise ValueError("zero scale with nonzero tile")
    return QuantizedTile(_quantize_rows(tile, scales, params), scales, params)


def quantize_input_vector(
    x, params: QuantParams, scale_value: float | None = None
) -> QuantizedVector:
    """Quantize one input chunk under its own bf16(max |x|) scale.

    scale_value overrides the adaptive scale (per-tensor ablation); values
    beyond it clip to the outermost level, as a real converter would.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise ValueError("input chunks are 1-d")
    scale = per_tensor_scale(x) if scale_value is None else float(scale_value)
    if scale == 0.0:
        if np.any(x != 0):
            raise ValueError("zero scale with nonzero chunk")
        return QuantizedVector(np.zeros(x.shape, dtype=np.int64), 0.0, params)
    return QuantizedVector(quantize(x, scale, params), scale, params)
