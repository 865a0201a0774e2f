"""Experiment harness: metrics, sensitivity scans, ablations, sweeps.

Segmentation metrics follow the usual conventions: pixel accuracy counts only
pixels whose label is not background (-1); IoU excludes background-labeled
pixels from both intersection and union and averages over classes present in
either mask.  Dataset-level numbers aggregate per-pixel over the whole set,
not per-image.

Every evaluation derives one noise seed per sample from cfg.rng_seed, so two
harness calls with the same seed see identical noise at identical sites —
metric differences between configurations are purely configurational.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .costmodel import CostParams, energy, throughput, workload_stats
from .model import BACKGROUND, ModelGraph, SegmentationSample, reference_forward
from .photocore import PhotocoreConfig, run_layers
from .rng import NoiseSource, derive_seed


class EmptyForegroundError(ValueError):
    """Raised when a metric needs foreground pixels and none exist."""


@dataclass(frozen=True)
class MetricReport:
    pixel_accuracy: float
    per_class_iou: dict[int, float]
    miou: float
    percent_of_fp32: float | None = None

    def vs_fp32(self, baseline: "MetricReport") -> "MetricReport":
        if baseline.miou == 0:
            return self
        return replace(self, percent_of_fp32=100.0 * self.miou / baseline.miou)


@dataclass(frozen=True)
class SensitivityRow:
    layer_index: int
    layer_kind: str
    miou_fp32: float
    miou_quantized: float
    miou_drop: float


@dataclass(frozen=True)
class RangeUtilization:
    layer_index: int
    histogram: np.ndarray  # normalized counts over 2*Dy+1 bins spanning [-1, 1]
    three_sigma_level_fraction: float
    max_abs: float


@dataclass(frozen=True)
class SweepRow:
    tile_size: int
    gain: float
    miou: float
    pixel_acc: float
    energy_rel: float
    throughput_ips: float
    utilization: float


def thread_count() -> int:
    env = os.environ.get("PHOTOCORE_SIM_THREADS")
    if env is not None:
        try:
            v = int(env)
        except ValueError as exc:
            raise ValueError(f"PHOTOCORE_SIM_THREADS={env!r} is not an integer") from exc
        return max(1, v)
    return min(8, os.cpu_count() or 1)


def _map_samples(fn, items):
    workers = thread_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# mask metrics


def _check_masks(pred, label):
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {label.shape}")
    return pred.astype(np.int64), label.astype(np.int64)


def _mask_counts(pred, label, class_count):
    """(correct, valid, inter[c], pred_area[c], label_area[c]) for one pair."""
    valid = label != BACKGROUND
    correct = int(np.count_nonzero((pred == label) & valid))
    inter = np.zeros(class_count, dtype=np.int64)
    pred_area = np.zeros(class_count, dtype=np.int64)
    label_area = np.zeros(class_count, dtype=np.int64)
    for c in range(class_count):
        p = (pred == c) & valid
        l = label == c
        inter[c] = np.count_nonzero(p & l)
        pred_area[c] = np.count_nonzero(p)
        label_area[c] = np.count_nonzero(l)
    return correct, int(np.count_nonzero(valid)), inter, pred_area, label_area


def _report_from_counts(correct, valid, inter, pred_area, label_area) -> MetricReport:
    if valid == 0:
        raise EmptyForegroundError("no non-background pixels to score")
    per_class = {}
    for c in range(len(inter)):
        union = pred_area[c] + label_area[c] - inter[c]
        if union > 0:  # class present in either mask
            per_class[int(c)] = float(inter[c] / union)
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MetricReport(
        pixel_accuracy=float(correct / valid),
        per_class_iou=per_class,
        miou=miou,
    )


def pixel_accuracy(pred_mask, label_mask) -> float:
    """Fraction of correctly predicted pixels among non-background ones."""
    pred, label = _check_masks(pred_mask, label_mask)
    valid = label != BACKGROUND
    total = int(np.count_nonzero(valid))
    if total == 0:
        raise EmptyForegroundError("mask contains only background pixels")
    return float(np.count_nonzero((pred == label) & valid) / total)


def mean_iou(pred_mask, label_mask, class_count: int) -> MetricReport:
    """Per-class IoU over classes present in either mask, plus their mean."""
    pred, label = _check_masks(pred_mask, label_mask)
    if class_count < 1:
        raise ValueError("class_count must be positive")
    return _report_from_counts(*_mask_counts(pred, label, class_count))


# ---------------------------------------------------------------------------
# dataset evaluation


def sample_noise(cfg: PhotocoreConfig, index: int) -> NoiseSource:
    # every inference sees its own noise, reproducibly
    return NoiseSource(derive_seed(cfg.rng_seed, f"sample:{index}"))


def predict_mask(model: ModelGraph, sample: SegmentationSample,
                 cfg: PhotocoreConfig | None = None, domains=None,
                 noise: NoiseSource | None = None) -> np.ndarray:
    """Predicted integer mask for one sample; cfg None means pure FP32."""
    if cfg is None:
        out = reference_forward(model, sample.image).data
    else:
        out = run_layers(model, sample.image.data, cfg, noise=noise, domains=domains)
    if out.ndim != 2:
        raise ValueError("model does not end in a 2-d mask; add argmax_channel")
    return np.asarray(out).astype(np.int64)


def evaluate_dataset(model: ModelGraph, dataset, cfg: PhotocoreConfig | None = None,
                     domains=None) -> MetricReport:
    """Aggregate MetricReport over all samples (per-pixel pooling)."""
    if not dataset:
        raise ValueError("empty dataset")

    def one(args):
        i, sample = args
        noise = sample_noise(cfg, i) if cfg is not None else None
        pred = predict_mask(model, sample, cfg, domains, noise)
        return _mask_counts(pred, sample.label, model.class_count)

    parts = _map_samples(one, list(enumerate(dataset)))
    correct = sum(p[0] for p in parts)
    valid = sum(p[1] for p in parts)
    inter = sum(p[2] for p in parts)
    pred_area = sum(p[3] for p in parts)
    label_area = sum(p[4] for p in parts)
    return _report_from_counts(correct, valid, inter, pred_area, label_area)


def _single_layer_domains(model: ModelGraph, layer_index: int) -> list[str]:
    return ["photocore" if i == layer_index else "digital" for i in range(len(model.layers))]


def layer_sensitivity_scan(model: ModelGraph, dataset, cfg: PhotocoreConfig) -> list[SensitivityRow]:
    """Quantize one core-capable layer at a time; report the mIoU drop."""
    eligible = model.offloadable_indices()
    if not eligible:
        raise ValueError("model has no photocore-eligible layers")
    base = evaluate_dataset(model, dataset)
    rows = []
    for idx in eligible:
        rep = evaluate_dataset(model, dataset, cfg, _single_layer_domains(model, idx))
        rows.append(
            SensitivityRow(
                layer_index=idx,
                layer_kind=model.layers[idx].kind,
                miou_fp32=base.miou,
                miou_quantized=rep.miou,
                miou_drop=base.miou - rep.miou,
            )
        )
    return rows


ABLATION_SETTINGS = (
    ("all", "none"),
    ("no_input_q", "input_q"),
    ("no_weight_q", "weight_q"),
    ("no_output_q", "output_q"),
)


def quantization_ablation(model: ModelGraph, dataset, cfg: PhotocoreConfig,
                          layer_index: int) -> dict[str, MetricReport]:
    """Table of bypass settings on one target layer (everything else digital)."""
    if layer_index not in model.offloadable_indices():
        raise ValueError(f"layer {layer_index} cannot run on the photocore")
    base = evaluate_dataset(model, dataset)
    domains = _single_layer_domains(model, layer_index)
    out: dict[str, MetricReport] = {}
    for setting, bypass in ABLATION_SETTINGS:
        rep = evaluate_dataset(model, dataset, cfg.with_(bypass=bypass), domains)
        out[setting] = rep.vs_fp32(base)
    return out


def abfp_ablation(model: ModelGraph, dataset, cfg: PhotocoreConfig) -> tuple[MetricReport, MetricReport]:
    """(adaptive per-row/per-chunk scales, single per-tensor scales) reports."""
    base = evaluate_dataset(model, dataset)
    with_abfp = evaluate_dataset(model, dataset, cfg.with_(scale_mode="per_vector"))
    without = evaluate_dataset(model, dataset, cfg.with_(scale_mode="per_tensor"))
    return with_abfp.vs_fp32(base), without.vs_fp32(base)


def range_utilization(model: ModelGraph, dataset, layer_index: int,
                      output_bits: int = 11) -> RangeUtilization:
    """How much of the output converter's level grid a layer actually uses.

    FP32 outputs of the layer are pooled over the dataset, normalized by
    their max magnitude s, and histogrammed over the 2*Dy+1 level grid in
    [-1, 1]; the fraction counts levels inside mean +/- 3 std.
    """
    if not 0 <= layer_index < len(model.layers):
        raise ValueError(f"no layer {layer_index}")
    if not dataset:
        raise ValueError("empty dataset")
    all_digital = ["digital"] * len(model.layers)
    cfg = PhotocoreConfig(tile_size=1)

    def one(sample):
        out = run_layers(model, sample.image.data, cfg, domains=all_digital,
                         stop_after=layer_index)
        return np.asarray(out, dtype=np.float64).ravel()

    values = np.concatenate(_map_samples(one, list(dataset)))
    levels = 2 ** (output_bits - 1) - 1
    bins = 2 * levels + 1
    s = float(np.max(np.abs(values)))
    norm = values / s if s > 0 else np.zeros_like(values)
    hist, _ = np.histogram(norm, bins=bins, range=(-1.0, 1.0))
    hist = hist / hist.sum() if hist.sum() else hist.astype(np.float64)
    mu = float(norm.mean())
    sd = float(norm.std())
    grid = np.arange(-levels, levels + 1, dtype=np.float64) / levels
    inside = int(np.count_nonzero((grid >= mu - 3 * sd) & (grid <= mu + 3 * sd)))
    return RangeUtilization(
        layer_index=layer_index,
        histogram=hist,
        three_sigma_level_fraction=inside / bins,
        max_abs=s,
    )


def sweep(model: ModelGraph, dataset, tile_sizes, gains, cfg: PhotocoreConfig,
          cost: CostParams = CostParams(), batch: int = 1) -> list[SweepRow]:
    """Accuracy + cost over the (tile size, gain) grid, one row per point."""
    if not tile_sizes or not gains:
        raise ValueError("sweep grid is empty")
    rows = []
    for n in tile_sizes:
        stats = workload_stats(model, n, batch)
        for g in gains:
            run_cfg = cfg.with_(tile_size=int(n), gain=float(g))
            rep = evaluate_dataset(model, dataset, run_cfg)
            rows.append(
                SweepRow(
                    tile_size=int(n),
                    gain=float(g),
                    miou=rep.miou,
                    pixel_acc=rep.pixel_accuracy,
                    energy_rel=energy(model, int(n), float(g), batch, cost),
                    throughput_ips=throughput(model, int(n), float(g), batch, cost),
                    utilization=stats.utilization,
                )
            )
    return rows
