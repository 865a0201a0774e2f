"""Bit-exact simulator of an analog photonic matrix-vector inference path.

The package models the full electro-photonic pipeline — adaptive block
floating-point quantization, tiled analog matrix-vector products with gain
and Gaussian read noise, output conversion, bfloat16 accumulation — plus the
first-order time/power cost model, segmentation-quality analysis utilities,
and noisy fine-tuning of model weights against a measured noise profile.
"""

from .abfp import (
    QuantizedTile,
    QuantizedVector,
    QuantParams,
    dequantize,
    extract_row_scales,
    per_tensor_scale,
    quantize,
    quantize_input_vector,
    quantize_tile,
    round_half_away,
)
from .analysis import (
    EmptyForegroundError,
    MetricReport,
    RangeUtilization,
    SensitivityRow,
    SweepRow,
    abfp_ablation,
    evaluate_dataset,
    layer_sensitivity_scan,
    mean_iou,
    pixel_accuracy,
    predict_mask,
    quantization_ablation,
    range_utilization,
    sweep,
)
from .costmodel import (
    CostParams,
    LayerWorkload,
    WorkloadStats,
    calibrate_laser,
    energy,
    power,
    throughput,
    workload_stats,
    workload_time,
)
from .dnf import (
    InsufficientSamplesError,
    LayerNoise,
    NoiseProfile,
    TrainConfig,
    TrainingDivergedError,
    dnf_train,
    estimate_noise_profile,
    load_profile,
    loss_and_gradients,
    save_profile,
    softmax_cross_entropy,
    training_loss,
    zero_profile,
)
from .model import (
    BACKGROUND,
    Layer,
    ModelFormatError,
    ModelGraph,
    SegmentationSample,
    conv2d_reference,
    load_dataset,
    load_model,
    reference_forward,
    save_dataset,
    save_model,
)
from .photocore import (
    PhotocoreConfig,
    lower_conv_kn2row,
    photocore_gemm,
    simulate_forward,
    tile_mvp,
    tile_operand,
)
from .rng import NoiseSource, derive_seed, generator
from .tensor import Tensor, TensorFileError, bf16_round, is_bf16_exact, load_tensor, save_tensor

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND",
    "CostParams",
    "EmptyForegroundError",
    "InsufficientSamplesError",
    "Layer",
    "LayerNoise",
    "LayerWorkload",
    "MetricReport",
    "ModelFormatError",
    "ModelGraph",
    "NoiseProfile",
    "NoiseSource",
    "PhotocoreConfig",
    "QuantParams",
    "QuantizedTile",
    "QuantizedVector",
    "RangeUtilization",
    "SegmentationSample",
    "SensitivityRow",
    "SweepRow",
    "Tensor",
    "TensorFileError",
    "TrainConfig",
    "TrainingDivergedError",
    "WorkloadStats",
    "abfp_ablation",
    "bf16_round",
    "calibrate_laser",
    "conv2d_reference",
    "dequantize",
    "derive_seed",
    "dnf_train",
    "energy",
    "estimate_noise_profile",
    "evaluate_dataset",
    "extract_row_scales",
    "generator",
    "is_bf16_exact",
    "layer_sensitivity_scan",
    "load_dataset",
    "load_model",
    "load_profile",
    "load_tensor",
    "loss_and_gradients",
    "lower_conv_kn2row",
    "mean_iou",
    "per_tensor_scale",
    "photocore_gemm",
    "pixel_accuracy",
    "power",
    "predict_mask",
    "quantization_ablation",
    "quantize",
    "quantize_input_vector",
    "quantize_tile",
    "range_utilization",
    "reference_forward",
    "round_half_away",
    "save_dataset",
    "save_model",
    "save_profile",
    "save_tensor",
    "simulate_forward",
    "softmax_cross_entropy",
    "sweep",
    "throughput",
    "tile_mvp",
    "tile_operand",
    "training_loss",
    "workload_stats",
    "workload_time",
    "zero_profile",
]
