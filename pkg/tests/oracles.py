"""Independent scalar reference implementations used to check the package.

Everything here is deliberately written the slow way - pure Python loops,
struct-level float handling, no helpers imported from photocore_sim - so that
agreement between the two codebases actually means something.
"""

from __future__ import annotations

import math
import struct


def f32(value: float) -> float:
    """Round a Python float to float32 precision."""
    return struct.unpack("<f", struct.pack("<f", value))[0]


def bf16_oracle(value: float) -> float:
    """Round to bfloat16: keep the top 16 bits of the float32 encoding,
    rounding the dropped fraction half-to-even."""
    if math.isnan(value):
        return value
    bits = struct.unpack("<I", struct.pack("<f", value))[0]
    low = bits & 0xFFFF0000
    frac = bits & 0xFFFF
    if frac > 0x8000 or (frac == 0x8000 and (low >> 16) & 1):
        low = (low + 0x10000) & 0xFFFFFFFF
    return struct.unpack("<f", struct.pack("<I", low))[0]


def round_half_away_oracle(v: float) -> float:
    return math.copysign(math.floor(abs(v) + 0.5), v)


def quantize_oracle(x: float, scale: float, max_level: int) -> int:
    if scale == 0.0:
        return 0
    v = x / scale * max_level
    r = round_half_away_oracle(v)
    return int(min(max(r, -max_level), max_level))


def _pad(rows, r, c):
    out = [[0.0] * c for _ in range(r)]
    for i, row in enumerate(rows):
        for j, v in enumerate(row):
            out[i][j] = v
    return out


def mvp_oracle(weights, inputs, n, gain, input_levels, weight_levels,
               output_levels, noise=None):
    """Scalar tiled matrix product through the full analog pipeline.

    weights: list of rows (RxK floats, float32-representable values)
    inputs:  list of rows (KxC floats)
    noise:   optional callable noise(tile_row, tile_col, col, length) giving
             already-scaled count-domain offsets for one column of one tile
    Returns list of rows (RxC floats).
    """
    rows = len(weights)
    inner = len(weights[0])
    cols = len(inputs[0])
    tile_rows = -(-rows // n)
    tile_cols = -(-inner // n)
    wpad = _pad(weights, tile_rows * n, tile_cols * n)
    xpad = _pad(inputs, tile_cols * n, cols)
    full_scale = n * input_levels * weight_levels

    acc = [[0.0] * cols for _ in range(tile_rows * n)]
    for tc in range(tile_cols):
        # quantize this K-chunk of every input column
        chunk = [xpad[tc * n + k] for k in range(n)]
        x_scales = []
        xq = [[0] * cols for _ in range(n)]
        for c in range(cols):
            s = bf16_oracle(f32(max(abs(chunk[k][c]) for k in range(n))))
            x_scales.append(s)
            for k in range(n):
                xq[k][c] = quantize_oracle(chunk[k][c], s, input_levels)
        for tr in range(tile_rows):
            tile = [wpad[tr * n + i][tc * n:(tc + 1) * n] for i in range(n)]
            w_scales = [bf16_oracle(f32(max(abs(v) for v in row))) for row in tile]
            wq = [[quantize_oracle(tile[i][k], w_scales[i], weight_levels)
                   for k in range(n)] for i in range(n)]
            part = [[0.0] * cols for _ in range(n)]
            for c in range(cols):
                eps = noise(tr, tc, c, n) if noise is not None else [0.0] * n
                for i in range(n):
                    counts = sum(wq[i][k] * xq[k][c] for k in range(n))
                    val = counts * gain + eps[i]
                    adc = round_half_away_oracle(val / full_scale * output_levels)
                    adc = min(max(adc, -float(output_levels)), float(output_levels))
                    factor = (n * w_scales[i] * x_scales[c]) / (gain * output_levels)
                    part[i][c] = bf16_oracle(adc * factor)
            for i in range(n):
                for c in range(cols):
                    acc[tr * n + i][c] = bf16_oracle(acc[tr * n + i][c] + part[i][c])
    return [acc[i][:cols] for i in range(rows)]


def conv2d_oracle(image, weight, stride, padding):
    """Naive sliding-window convolution; image (cin,h,w), weight (cout,cin,kh,kw)."""
    cout = len(weight)
    cin = len(image)
    h, w = len(image[0]), len(image[0][0])
    kh, kw = len(weight[0][0]), len(weight[0][0][0])
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = [[[0.0] * wo for _ in range(ho)] for _ in range(cout)]
    for o in range(cout):
        for y in range(ho):
            for x in range(wo):
                s = 0.0
                for c in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            yy = y * stride + i - padding
                            xx = x * stride + j - padding
                            if 0 <= yy < h and 0 <= xx < w:
                                s += image[c][yy][xx] * weight[o][c][i][j]
                out[o][y][x] = s
    return out


def iou_oracle(pred, label, class_count):
    """(pixel_accuracy, {cls: iou}, miou) with background label -1 excluded."""
    correct = valid = 0
    inter = [0] * class_count
    p_area = [0] * class_count
    l_area = [0] * class_count
    for prow, lrow in zip(pred, label):
        for p, l in zip(prow, lrow):
            if l < 0:
                continue
            valid += 1
            if p == l:
                correct += 1
            l_area[l] += 1
            p_area[p] += 1
            if p == l:
                inter[p] += 1
    per = {}
    for c in range(class_count):
        union = p_area[c] + l_area[c] - inter[c]
        if union > 0:
            per[c] = inter[c] / union
    if valid == 0:
        raise ZeroDivisionError("no foreground")
    return correct / valid, per, sum(per.values()) / len(per)
