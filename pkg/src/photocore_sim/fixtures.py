"""Constructed toy models and datasets with known failure modes.

Three segmentation fixtures, all variations of a nearest-centroid color
classifier so the FP32 baseline is essentially perfect and every accuracy
loss is attributable to the simulated hardware:

- uniform: well-conditioned weights and activations; robust to quantization
  at default bit-widths (every sensitivity drop should be small).
- outlier-layer: the first conv emits one channel scaled ~100x above the
  rest.  The consumer layer's per-chunk input scale is then dominated by that
  channel, its output-ADC step dwarfs the class-score margins, and the model
  collapses out of the box — but recovers once output quantization (and only
  output quantization) is bypassed.  The score layer forwards the outlier, so
  both layers' outputs squeeze the useful signal into a sliver of the output
  converter's level grid, which is what the range-utilization statistic
  flags.  The embed layer is 64 channels wide so the outlier is ~2% of the
  output mass and the 3-sigma level fraction lands well under 0.3.

  A note on fine-tuning: the ~100x channel feeds two trainable layers, so
  the loss curvature along the weight coordinates that multiply it is ~10^4x
  the curvature of the useful coordinates.  SGD on this fixture is stable
  only for learning rates of about 1e-3 and below; larger steps send those
  stiff coordinates into oscillation and tear the model apart within a few
  batches.
- saturating: all-positive weights and inputs drive the analog accumulate to
  a known fraction of full scale, so classification survives small gain,
  improves as gain lifts the signal over the injected analog noise, and
  collapses once gain pushes class scores into the output clip.

Plus two shape-only workload models for the cost model (weights are zeros;
only their dimensions matter).
"""

from __future__ import annotations

import numpy as np

from .model import Layer, ModelGraph, SegmentationSample, Tensor
from .rng import generator

CLASS_COUNT = 4

# class color centroids (positive, so relu never bites the features)
PALETTE = np.array(
    [
        [1.00, 0.10, 0.10],
        [0.10, 1.00, 0.10],
        [0.10, 0.10, 1.00],
        [0.80, 0.80, 0.75],
    ],
    dtype=np.float32,
)

# all-positive variant for the saturating fixture
PALETTE_POSITIVE = np.array(
    [
        [1.00, 0.25, 0.20],
        [0.25, 1.00, 0.20],
        [0.20, 0.25, 1.00],
        [0.70, 0.70, 0.65],
    ],
    dtype=np.float32,
)

PIXEL_NOISE = 0.08
OUTLIER_FACTOR = 100.0  # the "100x outlier channel"
OUTLIER_DIRECTION = np.array([0.45, 0.35, 0.40], dtype=np.float32)
OUTLIER_LEAK = 1e-3  # class scores peek at the outlier just enough for gradients
EMBED_CHANNELS = 64  # one outlier among 63 tame channels: ~2% of output mass

FIXTURE_KINDS = ("uniform", "outlier-layer", "saturating")


def make_dataset(seed: int, count: int = 8, size: int = 16,
                 palette: np.ndarray = PALETTE, noise: float = PIXEL_NOISE,
                 tag: str = "dataset") -> list[SegmentationSample]:
    """Quadrant-layout color segmentation samples with jittered boundaries."""
    rng = generator(seed, f"fixture:{tag}")
    samples = []
    for _ in range(count):
        rsplit = int(rng.integers(size // 4, 3 * size // 4 + 1))
        csplit = int(rng.integers(size // 4, 3 * size // 4 + 1))
        quads = rng.permutation(CLASS_COUNT)
        label = np.empty((size, size), dtype=np.int64)
        label[:rsplit, :csplit] = quads[0]
        label[:rsplit, csplit:] = quads[1]
        label[rsplit:, :csplit] = quads[2]
        label[rsplit:, csplit:] = quads[3]
        image = palette[label].transpose(2, 0, 1).astype(np.float32)
        image = image + noise * rng.standard_normal(image.shape).astype(np.float32)
        samples.append(SegmentationSample(Tensor(image), label))
    return samples


def _conv_weight(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float32))


def _centroid_head_bias(palette: np.ndarray) -> np.ndarray:
    # argmax_c <p_c, x> - |p_c|^2/2 is exactly nearest-centroid
    return (-0.5 * (palette**2).sum(axis=1)).astype(np.float32)


def uniform_fixture(seed: int, count: int = 8, size: int = 16):
    """(model, dataset): benign statistics end to end."""
    rng = generator(seed, "fixture:uniform-model")
    feat = np.zeros((8, 3, 3, 3), dtype=np.float32)
    for c in range(CLASS_COUNT):
        feat[c, :, 1, 1] = PALETTE[c]
    feat += 0.02 * rng.standard_normal(feat.shape).astype(np.float32)
    feat[CLASS_COUNT:] += 0.03 * rng.standard_normal((8 - CLASS_COUNT, 3, 3, 3)).astype(np.float32)

    head = np.zeros((CLASS_COUNT, 8, 1, 1), dtype=np.float32)
    for c in range(CLASS_COUNT):
        head[c, c, 0, 0] = 1.0
    head[:, CLASS_COUNT:, 0, 0] = 0.04 * rng.standard_normal((CLASS_COUNT, 8 - CLASS_COUNT)).astype(
        np.float32
    )

    model = ModelGraph(
        layers=(
            Layer("conv2d", weight=_conv_weight(feat), stride=1, padding=1,
                  execution_domain="photocore"),
            Layer("add_bias", bias=Tensor(np.zeros(8, dtype=np.float32))),
            Layer("relu"),
            Layer("conv2d", weight=_conv_weight(head), execution_domain="photocore"),
            Layer("add_bias", bias=Tensor(_centroid_head_bias(PALETTE))),
            Layer("argmax_channel"),
        ),
        input_shape=(3, size, size),
        class_count=CLASS_COUNT,
    )
    return model, make_dataset(seed, count, size, tag="uniform")


def outlier_fixture(seed: int, count: int = 8, size: int = 16):
    """(model, dataset): one ~100x output channel poisons the next layer's scales."""
    rng = generator(seed, "fixture:outlier-model")
    width = EMBED_CHANNELS
    embed = np.zeros((width, 3, 1, 1), dtype=np.float32)
    for c in range(CLASS_COUNT):
        embed[c, :, 0, 0] = PALETTE[c]
    embed[CLASS_COUNT : width - 1, :, 0, 0] = 0.05 * rng.standard_normal(
        (width - 1 - CLASS_COUNT, 3)
    ).astype(np.float32)
    embed[width - 1, :, 0, 0] = OUTLIER_FACTOR * OUTLIER_DIRECTION

    score = np.zeros((5, width, 1, 1), dtype=np.float32)
    for c in range(CLASS_COUNT):
        score[c, c, 0, 0] = 1.0
        score[c, CLASS_COUNT : width - 1, 0, 0] = 0.03 * rng.standard_normal(
            width - 1 - CLASS_COUNT
        ).astype(np.float32)
        score[c, width - 1, 0, 0] = OUTLIER_LEAK
    score[4, width - 1, 0, 0] = 1.0  # pass the outlier channel through

    head = np.zeros((CLASS_COUNT, 5, 1, 1), dtype=np.float32)
    for c in range(CLASS_COUNT):
        head[c, c, 0, 0] = 1.0

    score_bias = np.zeros(5, dtype=np.float32)
    score_bias[:CLASS_COUNT] = _centroid_head_bias(PALETTE)

    model = ModelGraph(
        layers=(
            Layer("conv2d", weight=_conv_weight(embed), execution_domain="photocore"),
            Layer("relu"),
            Layer("conv2d", weight=_conv_weight(score), execution_domain="photocore"),
            Layer("add_bias", bias=Tensor(score_bias)),
            Layer("conv2d", weight=_conv_weight(head)),  # digital head
            Layer("argmax_channel"),
        ),
        input_shape=(3, size, size),
        class_count=CLASS_COUNT,
    )
    return model, make_dataset(seed, count, size, tag="outlier")


# index of the layer whose inputs (and outputs) carry the outlier channel
OUTLIER_SENSITIVE_LAYER = 2
OUTLIER_EMBED_LAYER = 0

SATURATING_NOISE_STEPS = 20.0  # pre-ADC noise, in output-ADC steps


def saturating_fixture(seed: int, count: int = 8, size: int = 12):
    """(model, dataset): positive operands, scores at a known fraction of full scale."""
    weights = np.zeros((CLASS_COUNT, 3, 1, 1), dtype=np.float32)
    weights[:, :, 0, 0] = PALETTE_POSITIVE
    model = ModelGraph(
        layers=(
            Layer("conv2d", weight=_conv_weight(weights), execution_domain="photocore"),
            Layer("add_bias", bias=Tensor(_centroid_head_bias(PALETTE_POSITIVE))),
            Layer("argmax_channel"),
        ),
        input_shape=(3, size, size),
        class_count=CLASS_COUNT,
    )
    data = make_dataset(seed, count, size, palette=PALETTE_POSITIVE, noise=0.05,
                        tag="saturating")
    return model, data


def build_fixture(kind: str, seed: int, count: int = 8):
    """genfixture entry point: (model, dataset) for a fixture kind."""
    if kind == "uniform":
        return uniform_fixture(seed, count)
    if kind == "outlier-layer":
        return outlier_fixture(seed, count)
    if kind == "saturating":
        return saturating_fixture(seed, count)
    raise ValueError(f"unknown fixture kind {kind!r}; pick from {FIXTURE_KINDS}")


# ---------------------------------------------------------------------------
# shape-only workload models for the cost model


def cnn_workload_model() -> ModelGraph:
    """CNN-ish single conv: lowered GEMM 512x256 fed by 64 pixel vectors."""
    w = Tensor(np.zeros((512, 256, 1, 1), dtype=np.float32))
    return ModelGraph(
        layers=(Layer("conv2d", weight=w, execution_domain="photocore"),),
        input_shape=(256, 8, 8),
        class_count=1,
    )


def transformer_workload_model() -> ModelGraph:
    """Maskformer-ish: a much larger matrix times a long vector sequence."""
    w = Tensor(np.zeros((1024, 512, 1, 1), dtype=np.float32))
    return ModelGraph(
        layers=(Layer("conv2d", weight=w, execution_domain="photocore"),),
        input_shape=(512, 16, 16),
        class_count=1,
    )
