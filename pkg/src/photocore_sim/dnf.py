"""Differential noise fine-tuning.

The recovery pipeline has two halves.  First, per-layer noise statistics:
run each core-capable layer on the simulated hardware (everything else
digital), diff its output against the FP32 reference elementwise, and fit a
scalar Gaussian (mean, std) per layer.  Second, noise-aware training: plain
FP32 SGD where a fresh draw from each layer's Gaussian is added to that
layer's output every forward pass, and the backward pass treats the noise as
a constant.  The quantizers themselves never run during training.

Gradients are written out by hand for the small layer set (dense, conv2d via
im2col, relu, add_bias, pixelwise softmax cross-entropy) and verified against
finite differences in the tests.  Training math runs in float64 so those
checks are meaningful.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .model import (
    BACKGROUND,
    Layer,
    ModelGraph,
    Tensor,
    col2im,
    im2col,
)
from .photocore import PhotocoreConfig, run_layers
from .rng import NoiseSource, derive_seed, generator

PROFILE_VERSION = 1


class InsufficientSamplesError(ValueError):
    """Calibration data yielded fewer difference samples than required."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during fine-tuning."""


@dataclass(frozen=True)
class LayerNoise:
    mean: float
    std: float
    sample_count: int

    def __post_init__(self):
        if not (self.std >= 0 and math.isfinite(self.std) and math.isfinite(self.mean)):
            raise ValueError("noise stats must be finite with std >= 0")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")


@dataclass(frozen=True)
class NoiseProfile:
    """Per-eligible-layer Gaussian fit of (simulated - FP32) output error."""

    layers: dict[int, LayerNoise]
    seed: int = 0

    def is_zero(self) -> bool:
        return all(l.mean == 0 and l.std == 0 for l in self.layers.values())


def zero_profile(model: ModelGraph) -> NoiseProfile:
    """The degenerate profile that turns dnf_train into plain fine-tuning."""
    return NoiseProfile({i: LayerNoise(0.0, 0.0, 0) for i in model.offloadable_indices()})


def save_profile(profile: NoiseProfile, path) -> None:
    doc = {
        "pcnoise_version": PROFILE_VERSION,
        "seed": profile.seed,
        "layers": {
            str(i): {"mean": ln.mean, "std": ln.std, "sample_count": ln.sample_count}
            for i, ln in sorted(profile.layers.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_profile(path) -> NoiseProfile:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or doc.get("pcnoise_version") != PROFILE_VERSION:
        raise ValueError(f"{path}: missing or unsupported pcnoise_version")
    layers = {}
    for key, entry in doc.get("layers", {}).items():
        layers[int(key)] = LayerNoise(
            float(entry["mean"]), float(entry["std"]), int(entry["sample_count"])
        )
    return NoiseProfile(layers, seed=int(doc.get("seed", 0)))


# ---------------------------------------------------------------------------
# profile estimation


def estimate_noise_profile(model: ModelGraph, calibration_data, cfg: PhotocoreConfig,
                           min_samples: int = 10000) -> NoiseProfile:
    """Fit (mean, std) of simulated-vs-FP32 output error for each eligible layer.

    Differences are pooled elementwise over the whole calibration set; the
    estimate is deterministic given cfg.rng_seed and calibration order.
    """
    if not calibration_data:
        raise ValueError("empty calibration set")
    eligible = model.offloadable_indices()
    if not eligible:
        raise ValueError("model has no photocore-eligible layers")
    all_digital = ["digital"] * len(model.layers)
    layers: dict[int, LayerNoise] = {}
    for idx in eligible:
        domains = ["photocore" if i == idx else "digital" for i in range(len(model.layers))]
        total = 0.0
        total_sq = 0.0
        count = 0
        for i, sample in enumerate(calibration_data):
            noise = NoiseSource(derive_seed(cfg.rng_seed, f"calib:{i}"))
            sim = run_layers(model, sample.image.data, cfg, noise, domains, stop_after=idx)
            ref = run_layers(model, sample.image.data, cfg, domains=all_digital, stop_after=idx)
            d = np.asarray(sim, dtype=np.float64).ravel() - np.asarray(ref, dtype=np.float64).ravel()
            total += float(d.sum())
            total_sq += float(np.dot(d, d))
            count += d.size
        if count < min_samples:
            raise InsufficientSamplesError(
                f"layer {idx}: {count} difference samples < required {min_samples}"
            )
        mean = total / count
        var = max(total_sq / count - mean * mean, 0.0)
        std = math.sqrt(var)
        if abs(mean) > std:
            warnings.warn(
                f"layer {idx}: |mean error| {mean:.3g} exceeds std {std:.3g} — "
                "saturation bias, the Gaussian fit is suspect",
                stacklevel=2,
            )
        layers[idx] = LayerNoise(mean, std, count)
    return NoiseProfile(layers, seed=cfg.rng_seed)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int = 1
    batch_size: int = 4
    loss: str = "softmax_cross_entropy"
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.loss != "softmax_cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean pixelwise CE over non-background labels; returns (loss, dlogits).

    logits: (C,) with scalar label, or (C, H, W) with (H, W) labels.
    """
    logits = np.asarray(logits, dtype=np.float64)
    flat = logits.reshape(logits.shape[0], -1)
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    if lab.shape[0] != flat.shape[1]:
        raise ValueError("label/logit pixel counts differ")
    valid = lab != BACKGROUND
    npix = int(np.count_nonzero(valid))
    if npix == 0:
        raise ValueError("no labeled pixels to train on")
    z = flat - flat.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    cols = np.nonzero(valid)[0]
    loss = -float(logp[lab[cols], cols].sum()) / npix
    grad = np.zeros_like(flat)
    p = np.exp(logp[:, cols])
    p[lab[cols], np.arange(len(cols))] -= 1.0
    grad[:, cols] = p / npix
    return loss, grad.reshape(logits.shape)


def _train_chain(model: ModelGraph) -> list[Layer]:
    """Layers the trainer runs: the chain up to a trailing argmax head."""
    layers = list(model.layers)
    if layers and layers[-1].kind == "argmax_channel":
        layers = layers[:-1]
    if any(l.kind == "argmax_channel" for l in layers):
        raise ValueError("argmax_channel inside the chain is not trainable")
    return layers


def _forward_train(chain, weights, biases, x, noise_draw):
    """float64 forward with per-layer caches; noise_draw(idx, shape) -> array|None."""
    x = np.asarray(x, dtype=np.float64)
    caches = []
    for idx, layer in enumerate(chain):
        if layer.kind == "dense":
            cache = ("dense", idx, x)
            x = weights[idx] @ x
        elif layer.kind == "conv2d":
            cout, cin, kh, kw = layer.weight.shape
            cols = im2col(x, kh, kw, layer.stride, layer.padding)
            z = weights[idx].reshape(cout, cin * kh * kw) @ cols
            hp = x.shape[1] + 2 * layer.padding
            wp = x.shape[2] + 2 * layer.padding
            ho = (hp - kh) // layer.stride + 1
            wo = (wp - kw) // layer.stride + 1
            cache = ("conv2d", idx, x.shape, cols)
            x = z.reshape(cout, ho, wo)
        elif layer.kind == "relu":
            cache = ("relu", idx, x > 0)
            x = np.maximum(x, 0.0)
        elif layer.kind == "add_bias":
            cache = ("add_bias", idx, x.ndim)
            x = x + (biases[idx] if x.ndim == 1 else biases[idx][:, None, None])
        else:  # pragma: no cover - _train_chain filters argmax already
            raise ValueError(f"untrainable layer kind {layer.kind}")
        nu = noise_draw(idx, x.shape)
        if nu is not None:
            x = x + nu
        caches.append(cache)
    return x, caches


def _backward_train(chain, weights, caches, dlogits, grad_w, grad_b):
    """Accumulate parameter gradients; injected noise backprops as identity."""
    dz = np.asarray(dlogits, dtype=np.float64)
    for layer, cache in zip(reversed(chain), reversed(caches)):
        kind = cache[0]
        if kind == "dense":
            _, idx, x_in = cache
            grad_w[idx] += np.outer(dz, x_in)
            dz = weights[idx].T @ dz
        elif kind == "conv2d":
            _, idx, in_shape, cols = cache
            cout, cin, kh, kw = layer.weight.shape
            dzf = dz.reshape(cout, -1)
            grad_w[idx] += (dzf @ cols.T).reshape(cout, cin, kh, kw)
            dcols = weights[idx].reshape(cout, cin * kh * kw).T @ dzf
            dz = col2im(dcols, in_shape, kh, kw, layer.stride, layer.padding)
        elif kind == "relu":
            _, idx, mask = cache
            dz = dz * mask
        elif kind == "add_bias":
            _, idx, ndim = cache
            grad_b[idx] += dz if ndim == 1 else dz.sum(axis=(1, 2))
    return dz


def training_loss(model: ModelGraph, sample) -> float:
    """FP32-chain loss of one sample with no noise (float64 math)."""
    chain = _train_chain(model)
    weights = {i: l.weight.data.astype(np.float64) for i, l in enumerate(chain) if l.weight is not None}
    biases = {i: l.bias.data.astype(np.float64) for i, l in enumerate(chain) if l.bias is not None}
    logits, _ = _forward_train(chain, weights, biases, sample.image.data, lambda i, s: None)
    loss, _ = softmax_cross_entropy(logits, sample.label)
    return loss


def loss_and_gradients(model: ModelGraph, sample):
    """(loss, weight grads, bias grads) for one sample, noise-free."""
    chain = _train_chain(model)
    weights = {i: l.weight.data.astype(np.float64) for i, l in enumerate(chain) if l.weight is not None}
    biases = {i: l.bias.data.astype(np.float64) for i, l in enumerate(chain) if l.bias is not None}
    grad_w = {i: np.zeros_like(w) for i, w in weights.items()}
    grad_b = {i: np.zeros_like(b) for i, b in biases.items()}
    logits, caches = _forward_train(chain, weights, biases, sample.image.data, lambda i, s: None)
    loss, dlogits = softmax_cross_entropy(logits, sample.label)
    _backward_train(chain, weights, caches, dlogits, grad_w, grad_b)
    return loss, grad_w, grad_b


def dnf_train(model: ModelGraph, train_data, profile: NoiseProfile, tc: TrainConfig,
              loss_log: list | None = None) -> ModelGraph:
    """SGD on the FP32 chain with profile noise injected at eligible outputs.

    Returns a new ModelGraph with updated weights/biases; structure, domains
    and the argmax head are untouched.  loss_log, if given, receives the mean
    per-batch loss of every optimization step.
    """
    if not train_data:
        raise ValueError("empty training set")
    if set(profile.layers) != set(model.offloadable_indices()):
        raise ValueError("profile layers do not match the model's eligible layers")
    chain = _train_chain(model)
    weights = {i: l.weight.data.astype(np.float64) for i, l in enumerate(chain) if l.weight is not None}
    biases = {i: l.bias.data.astype(np.float64) for i, l in enumerate(chain) if l.bias is not None}
    rng = generator(tc.rng_seed, "dnf-train")

    def noise_draw(idx, shape):
        ln = profile.layers.get(idx)
        if ln is None or (ln.mean == 0.0 and ln.std == 0.0):
            return None
        return ln.mean + ln.std * rng.standard_normal(shape)

    samples = list(train_data)
    for _epoch in range(tc.epochs):
        for start in range(0, len(samples), tc.batch_size):
            batch = samples[start : start + tc.batch_size]
            grad_w = {i: np.zeros_like(w) for i, w in weights.items()}
            grad_b = {i: np.zeros_like(b) for i, b in biases.items()}
            batch_loss = 0.0
            for sample in batch:
                logits, caches = _forward_train(
                    chain, weights, biases, sample.image.data, noise_draw
                )
                loss, dlogits = softmax_cross_entropy(logits, sample.label)
                batch_loss += loss
                _backward_train(chain, weights, caches, dlogits / len(batch), grad_w, grad_b)
            batch_loss /= len(batch)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(f"loss became {batch_loss}")
            if loss_log is not None:
                loss_log.append(batch_loss)
            for i in grad_w:
                weights[i] = weights[i] - tc.learning_rate * grad_w[i]
            for i in grad_b:
                biases[i] = biases[i] - tc.learning_rate * grad_b[i]

    new_layers = []
    for i, layer in enumerate(model.layers):
        if i in weights:
            layer = replace(layer, weight=Tensor(weights[i].astype(np.float32)))
        if i in biases:
            layer = replace(layer, bias=Tensor(biases[i].astype(np.float32)))
        new_layers.append(layer)
    return ModelGraph(tuple(new_layers), model.input_shape, model.class_count)
