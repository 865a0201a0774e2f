"""The simulated analog matrix pipeline.

One tile MVP, in pre-ADC "count" units (the integer grid the converters see):

    counts  = Q(W_tile) @ Q(x_chunk)            exact int64, |.| <= n*Dx*Dw
    val     = counts * G + eps                  eps ~ N(0, sigma), per element
    adc     = clip(round(val / (n*Dx*Dw) * Dy), -Dy, Dy)
    y_i     = adc_i * (n * Sw_i * Sx) / (G * Dy)   then rounded to bf16

Partial results accumulate across K-tiles in ascending tile index, in bf16.
Bypassing a stage replaces its quantizer with an exact passthrough in the same
count units, so the noise term keeps its physical scale; bypassing everything
("all") degenerates to the plain float product plus (optionally) scaled noise.

The expression order above is deliberate and load-bearing: tests pin the
output bit-for-bit against a scalar re-implementation, so don't "simplify"
the arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .abfp import (
    QuantParams,
    QuantizedTile,
    QuantizedVector,
    extract_row_scales,
    per_tensor_scale,
    quantize_tile,
    round_half_away,
)
from .model import Layer, ModelGraph, Tensor, eval_layer_digital
from .rng import NoiseSource
from .tensor import bf16_round

BYPASS_MODES = ("none", "input_q", "weight_q", "output_q", "all")
SCALE_MODES = ("per_vector", "per_tensor")

# the analog accumulate must stay exactly representable in int64/float64
_MAX_FULL_SCALE = 1 << 31


@dataclass(frozen=True)
class PhotocoreConfig:
    """Static description of one core configuration.

    noise_sigma is the std of the additive pre-ADC noise in output count
    units; None picks the default of 1/20 of an output-ADC step.  scale_mode
    "per_tensor" replaces the adaptive per-row/per-chunk scales with one scale
    per operand (the ablation baseline).
    """

    tile_size: int
    input_bits: int = 10
    weight_bits: int = 7
    output_bits: int = 11
    gain: float = 4.0
    noise_sigma: float | None = None
    rng_seed: int = 0
    bypass: str = "none"
    scale_mode: str = "per_vector"

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        for name in ("input_bits", "weight_bits", "output_bits"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if not (self.gain > 0 and math.isfinite(self.gain)):
            raise ValueError("gain must be a positive finite real")
        if self.noise_sigma is not None and not (
            self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)
        ):
            raise ValueError("noise_sigma must be >= 0")
        if self.bypass not in BYPASS_MODES:
            raise ValueError(f"bypass must be one of {BYPASS_MODES}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if self.full_scale_counts > _MAX_FULL_SCALE:
            raise ValueError(
                f"n*Dx*Dw = {self.full_scale_counts} overflows the exact integer "
                f"accumulate (limit {_MAX_FULL_SCALE})"
            )

    @property
    def input_params(self) -> QuantParams:
        return QuantParams(self.input_bits)

    @property
    def weight_params(self) -> QuantParams:
        return QuantParams(self.weight_bits)

    @property
    def output_params(self) -> QuantParams:
        return QuantParams(self.output_bits)

    @property
    def full_scale_counts(self) -> int:
        """n * Dx * Dw: the integer product bound and the ADC clip range."""
        return (
            self.tile_size
            * self.input_params.max_level
            * self.weight_params.max_level
        )

    @property
    def adc_step_counts(self) -> float:
        return self.full_scale_counts / self.output_params.max_level

    @property
    def sigma_counts(self) -> float:
        if self.noise_sigma is None:
            return 0.05 * self.adc_step_counts
        return float(self.noise_sigma)

    @property
    def quantizes_input(self) -> bool:
        return self.bypass not in ("input_q", "all")

    @property
    def quantizes_weight(self) -> bool:
        return self.bypass not in ("weight_q", "all")

    @property
    def quantizes_output(self) -> bool:
        return self.bypass not in ("output_q", "all")

    def with_(self, **kw) -> "PhotocoreConfig":
        return replace(self, **kw)

    def noise_source(self) -> NoiseSource:
        return NoiseSource(self.rng_seed)


@dataclass(frozen=True)
class TiledOperand:
    """A matrix cut into a grid of n x n zero-padded tiles."""

    tiles: np.ndarray  # (tile_rows, tile_cols, n, n)
    original_shape: tuple[int, int]
    padded_shape: tuple[int, int]

    @property
    def grid(self) -> tuple[int, int]:
        return self.tiles.shape[:2]


def tile_operand(matrix, n: int) -> TiledOperand:
    """Zero-pad `matrix` up to multiples of n and cut it into n x n tiles."""
    if n < 1:
        raise ValueError("tile size must be >= 1")
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError("tiling is defined for 2-d operands")
    r, c = m.shape
    tr, tc = -(-r // n), -(-c // n)
    padded = np.zeros((tr * n, tc * n), dtype=m.dtype)
    padded[:r, :c] = m
    tiles = padded.reshape(tr, n, tc, n).swapaxes(1, 2).copy()
    return TiledOperand(tiles, (r, c), (tr * n, tc * n))


# ---------------------------------------------------------------------------
# kn2row lowering for convolutions


@dataclass(frozen=True)
class ConvLowering:
    """conv2d rewritten as one GEMM plus a shift-add recomposition.

    weight_matrix is (kh*kw*cout, cin): kernel offset (i, j) owns the row
    block [(i*kw + j)*cout, ...).  input_matrix is the zero-padded image
    flattened to (cin, hp*wp), one column per pixel — the "input vectors" the
    core consumes.
    """

    weight_matrix: np.ndarray
    input_matrix: np.ndarray
    kernel_hw: tuple[int, int]
    out_channels: int
    stride: int
    padded_hw: tuple[int, int]
    out_hw: tuple[int, int]

    def recompose(self, gemm_out) -> np.ndarray:
        """Shift-add the GEMM result back into a (cout, ho, wo) map (float32)."""
        kh, kw = self.kernel_hw
        hp, wp = self.padded_hw
        ho, wo = self.out_hw
        s = self.stride
        g = np.asarray(gemm_out, dtype=np.float32).reshape(kh, kw, self.out_channels, hp, wp)
        out = np.zeros((self.out_channels, ho, wo), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                out += g[i, j, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
        return out


def lower_conv_kn2row(layer: Layer, x) -> ConvLowering:
    """Lower a conv2d layer over input x (CHW) into GEMM form."""
    if layer.kind != "conv2d":
        raise ValueError("kn2row lowering applies to conv2d layers")
    x = np.asarray(x, dtype=np.float32)
    cout, cin, kh, kw = layer.weight.shape
    if x.ndim != 3 or x.shape[0] != cin:
        raise ValueError(f"conv weight {layer.weight.shape} cannot consume {x.shape}")
    p, s = layer.padding, layer.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    _, hp, wp = xp.shape
    if hp < kh or wp < kw:
        raise ValueError("kernel larger than padded input")
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    # (cout,cin,kh,kw) -> (kh,kw,cout,cin) -> stacked row blocks
    wmat = layer.weight.data.transpose(2, 3, 0, 1).reshape(kh * kw * cout, cin)
    return ConvLowering(
        weight_matrix=np.ascontiguousarray(wmat),
        input_matrix=xp.reshape(cin, hp * wp),
        kernel_hw=(kh, kw),
        out_channels=cout,
        stride=s,
        padded_hw=(hp, wp),
        out_hw=(ho, wo),
    )


# ---------------------------------------------------------------------------
# count-domain operand preparation

def _passthrough_rows(block64: np.ndarray, scales64: np.ndarray, d: int) -> np.ndarray:
    """Exact count-domain image of rows that skip the DAC: x / S * D."""
    safe = np.where(scales64 > 0, scales64, 1.0)
    return block64 / safe[:, None] * d


def _weight_tile_counts(tile_f32, cfg, override):
    """(counts, row_scales_f64) for one weight tile, honoring bypass/scale_mode."""
    if cfg.quantizes_weight:
        qt = quantize_tile(tile_f32, cfg.weight_params, scale_value=override)
        return qt.levels, qt.row_scales.astype(np.float64)
    if override is None:
        scales = extract_row_scales(tile_f32)
    else:
        scales = np.full(tile_f32.shape[0], np.float32(override), dtype=np.float32)
    scales64 = scales.astype(np.float64)
    counts = _passthrough_rows(
        np.asarray(tile_f32, dtype=np.float64), scales64, cfg.weight_params.max_level
    )
    return counts, scales64


def _input_chunk_counts(chunk_f32, cfg, override):
    """(counts, scales_f64) for one (n, M) stack of input chunks (per column)."""
    chunk_f32 = np.asarray(chunk_f32, dtype=np.float32)
    if override is None:
        scales = bf16_round(np.max(np.abs(chunk_f32), axis=0))
    else:
        scales = np.full(chunk_f32.shape[1], np.float32(override), dtype=np.float32)
    scales64 = scales.astype(np.float64)
    chunk64 = np.asarray(chunk_f32, dtype=np.float64)
    d = cfg.input_params.max_level
    safe = np.where(scales64 > 0, scales64, 1.0)[None, :]
    if cfg.quantizes_input:
        q = round_half_away(chunk64 / safe * d)
        counts = np.clip(q, -d, d).astype(np.int64)
        counts[:, scales64 == 0] = 0
    else:
        counts = chunk64 / safe * d
    return counts, scales64


def _finish_block(val: np.ndarray, w_scales64: np.ndarray, x_scales64: np.ndarray, cfg):
    """Output stage for a (n, M) block of gained+noised counts -> real outputs."""
    if cfg.quantizes_output:
        dy = cfg.output_params.max_level
        adc = np.clip(round_half_away(val / cfg.full_scale_counts * dy), -dy, dy)
        factor = np.multiply.outer(cfg.tile_size * w_scales64, x_scales64) / (cfg.gain * dy)
        return bf16_round(adc * factor)
    factor = np.multiply.outer(w_scales64, x_scales64) / (
        cfg.weight_params.max_level * cfg.input_params.max_level
    )
    return (val / cfg.gain) * factor


def _noise_block(noise, sigma, layer, tr, tc, rows, cols):
    """(rows, cols) gaussian counts; column m comes from the vector-m stream."""
    eps = np.empty((rows, cols), dtype=np.float64)
    for m in range(cols):
        eps[:, m] = noise.normal(layer, tr, tc, m, rows)
    return eps * sigma


def photocore_gemm(weights, inputs, cfg: PhotocoreConfig, noise: NoiseSource | None = None,
                   layer_index: int = 0) -> np.ndarray:
    """Full tiled matrix product on the simulated core.

    weights (R, C) x inputs (C, M) -> (R, M).  Column m of `inputs` is input
    vector m for noise keying.  Quantized-output runs return bf16 values in
    float32-compatible float64; bypassed-output runs return plain float64.
    """
    W = np.asarray(weights, dtype=np.float32)
    X = np.asarray(inputs, dtype=np.float32)
    if W.ndim != 2 or X.ndim != 2 or W.shape[1] != X.shape[0]:
        raise ValueError(f"cannot multiply {W.shape} by {X.shape}")
    if noise is None:
        noise = cfg.noise_source()
    n = cfg.tile_size
    r, c = W.shape
    m = X.shape[1]
    wt = tile_operand(W, n)
    trows, tcols = wt.grid
    xp = np.zeros((tcols * n, m), dtype=np.float32)
    xp[:c] = X
    sigma = cfg.sigma_counts

    w_override = per_tensor_scale(W) if cfg.scale_mode == "per_tensor" else None
    x_override = per_tensor_scale(X) if cfg.scale_mode == "per_tensor" else None

    if cfg.bypass == "all":
        # no converters anywhere: exact float products, noise still in-scale
        out = np.zeros((trows * n, m), dtype=np.float64)
        xp64 = xp.astype(np.float64)
        for tr in range(trows):
            acc = np.zeros((n, m), dtype=np.float64)
            for tc in range(tcols):
                tile = wt.tiles[tr, tc]
                block = tile.astype(np.float64) @ xp64[tc * n : (tc + 1) * n]
                if sigma > 0:
                    if w_override is None:
                        ws = extract_row_scales(tile).astype(np.float64)
                    else:
                        ws = np.full(n, float(w_override))
                    if x_override is None:
                        xs = bf16_round(
                            np.max(np.abs(xp[tc * n : (tc + 1) * n]), axis=0)
                        ).astype(np.float64)
                    else:
                        xs = np.full(m, float(x_override))
                    eps = _noise_block(noise, sigma, layer_index, tr, tc, n, m)
                    scale = np.multiply.outer(ws, xs) / (
                        cfg.gain * cfg.weight_params.max_level * cfg.input_params.max_level
                    )
                    block = block + eps * scale
                acc += block
            out[tr * n : (tr + 1) * n] = acc
        return out[:r]

    w_counts = []
    w_scales = []
    for tr in range(trows):
        row_counts, row_scales = [], []
        for tc in range(tcols):
            counts, scales = _weight_tile_counts(wt.tiles[tr, tc], cfg, w_override)
            row_counts.append(counts)
            row_scales.append(scales)
        w_counts.append(row_counts)
        w_scales.append(row_scales)

    x_counts, x_scales = [], []
    for tc in range(tcols):
        counts, scales = _input_chunk_counts(xp[tc * n : (tc + 1) * n], cfg, x_override)
        x_counts.append(counts)
        x_scales.append(scales)

    out = np.zeros((trows * n, m), dtype=np.float64)
    for tr in range(trows):
        acc = None
        for tc in range(tcols):
            prod = w_counts[tr][tc] @ x_counts[tc]
            val = prod.astype(np.float64) * cfg.gain
            if sigma > 0:
                val = val + _noise_block(noise, sigma, layer_index, tr, tc, n, m)
            part = _finish_block(val, w_scales[tr][tc], x_scales[tc], cfg)
            if acc is None:
                acc = np.asarray(part, dtype=np.float64)
            elif cfg.quantizes_output:
                acc = bf16_round(acc + np.asarray(part, dtype=np.float64)).astype(np.float64)
            else:
                acc = acc + part
        out[tr * n : (tr + 1) * n] = acc
    return out[:r]


def tile_mvp(wq, xq, cfg: PhotocoreConfig, noise: NoiseSource | None = None,
             key: tuple[int, int, int, int] = (0, 0, 0, 0)) -> np.ndarray:
    """One n x n tile times one length-n chunk, keyed by (layer, trow, tcol, vec).

    Operands may be pre-quantized containers (QuantizedTile / QuantizedVector,
    only meaningful when the matching stage quantizes) or raw float blocks,
    which are prepared here according to cfg — the only way to express a
    bypassed stage.
    """
    n = cfg.tile_size
    if noise is None:
        noise = cfg.noise_source()
    layer, tr, tc, vec = (int(k) for k in key)
    sigma = cfg.sigma_counts

    if isinstance(wq, QuantizedTile):
        if not cfg.quantizes_weight:
            raise ValueError("pre-quantized weights contradict the weight bypass")
        if wq.shape != (n, n) or wq.params != cfg.weight_params:
            raise ValueError("weight tile does not match cfg")
        w_counts = wq.levels
        w_scales = wq.row_scales.astype(np.float64)
        w_raw = None
    else:
        w_raw = np.asarray(wq, dtype=np.float32)
        if w_raw.shape != (n, n):
            raise ValueError(f"weight tile must be {(n, n)}")
        w_counts, w_scales = _weight_tile_counts(w_raw, cfg, None)

    if isinstance(xq, QuantizedVector):
        if not cfg.quantizes_input:
            raise ValueError("pre-quantized inputs contradict the input bypass")
        if xq.levels.shape != (n,) or xq.params != cfg.input_params:
            raise ValueError("input chunk does not match cfg")
        x_counts = xq.levels[:, None]
        x_scales = np.array([xq.scale], dtype=np.float64)
        x_raw = None
    else:
        x_raw = np.asarray(xq, dtype=np.float32)
        if x_raw.shape != (n,):
            raise ValueError(f"input chunk must be length {n}")
        x_counts, x_scales = _input_chunk_counts(x_raw[:, None], cfg, None)

    if cfg.bypass == "all":
        if w_raw is None or x_raw is None:
            raise ValueError("bypass=all needs raw operands")
        y = w_raw.astype(np.float64) @ x_raw.astype(np.float64)
        if sigma > 0:
            eps = noise.normal(layer, tr, tc, vec, n)
            scale = (w_scales * float(x_scales[0])) / (
                cfg.gain * cfg.weight_params.max_level * cfg.input_params.max_level
            )
            y = y + (eps * sigma) * scale
        return y

    prod = w_counts @ x_counts
    val = prod.astype(np.float64) * cfg.gain
    if sigma > 0:
        val = val + (noise.normal(layer, tr, tc, vec, n) * sigma)[:, None]
    return _finish_block(val, w_scales, x_scales, cfg)[:, 0]


# ---------------------------------------------------------------------------
# whole-model forward

def _photocore_layer(layer: Layer, x: np.ndarray, cfg, noise, layer_index: int) -> np.ndarray:
    if layer.kind == "dense":
        y = photocore_gemm(layer.weight.data, x[:, None], cfg, noise, layer_index)
        return y[:, 0].astype(np.float32)
    lowering = lower_conv_kn2row(layer, x)
    g = photocore_gemm(lowering.weight_matrix, lowering.input_matrix, cfg, noise, layer_index)
    return lowering.recompose(g)


def run_layers(model: ModelGraph, image: np.ndarray, cfg: PhotocoreConfig,
               noise: NoiseSource | None = None, domains=None, collect=None,
               stop_after: int | None = None) -> np.ndarray:
    """Drive the layer chain with per-layer execution domains.

    domains overrides the per-layer declared execution_domain (analysis scans
    move layers on and off the core without editing the model).  collect, if
    given, is called with (layer_index, output_array) after every layer.
    stop_after cuts the run short, returning that layer's output.
    """
    if noise is None:
        noise = cfg.noise_source()
    if domains is None:
        domains = [l.execution_domain for l in model.layers]
    if len(domains) != len(model.layers):
        raise ValueError("domain override length mismatch")
    x = np.asarray(image, dtype=np.float32)
    for idx, (layer, domain) in enumerate(zip(model.layers, domains)):
        if domain == "photocore":
            if layer.kind not in ("dense", "conv2d"):
                raise ValueError(f"{layer.kind} cannot run on the photocore")
            x = _photocore_layer(layer, x, cfg, noise, idx)
        else:
            x = eval_layer_digital(layer, x)
        if collect is not None:
            collect(idx, x)
        if stop_after is not None and idx == stop_after:
            return x
    return x


def simulate_forward(model: ModelGraph, input: Tensor, cfg: PhotocoreConfig,
                     noise: NoiseSource | None = None) -> Tensor:
    """Whole-model forward with photocore layers simulated, rest in float32."""
    if input.shape != model.input_shape:
        raise ValueError(f"input {input.shape} does not match model {model.input_shape}")
    out = run_layers(model, input.data, cfg, noise)
    return Tensor(np.asarray(out, dtype=np.float32))
