"""Toy model graphs, their float32 reference semantics, and file formats.

A model is a straight-line chain of layers over CHW image tensors (or flat
vectors for dense-only chains).  Two layer kinds carry weights and may execute
on the photonic core (dense, conv2d); the rest are cheap digital glue.

Model files are JSON ("pcmodel_version": 1) with weights inline as base64 or
as relative .pcten references.  Datasets are directories of img_%04d.pcten /
lbl_%04d.pcten pairs; labels store integer class ids as float32, with -1
marking background pixels that carry no class.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import FORMATS, Tensor, load_tensor, save_tensor

MODEL_VERSION = 1
BACKGROUND = -1

LAYER_KINDS = ("dense", "conv2d", "relu", "add_bias", "argmax_channel")
DOMAINS = ("digital", "photocore")
OFFLOADABLE_KINDS = ("dense", "conv2d")


class ModelFormatError(Exception):
    """Raised for malformed model files or dataset directories."""


@dataclass(frozen=True)
class Layer:
    kind: str
    weight: Tensor | None = None
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    execution_domain: str = "digital"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.execution_domain not in DOMAINS:
            raise ValueError(f"unknown execution domain {self.execution_domain!r}")
        if self.execution_domain == "photocore" and self.kind not in OFFLOADABLE_KINDS:
            raise ValueError(f"{self.kind} layers cannot run on the photocore")
        if self.kind == "dense":
            if self.weight is None or len(self.weight.shape) != 2:
                raise ValueError("dense layer needs a 2-d weight tensor")
        elif self.kind == "conv2d":
            if self.weight is None or len(self.weight.shape) != 4:
                raise ValueError("conv2d layer needs a 4-d (cout,cin,kh,kw) weight")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("conv2d needs stride >= 1 and padding >= 0")
        elif self.weight is not None:
            raise ValueError(f"{self.kind} layer takes no weight")
        if self.kind == "add_bias":
            if self.bias is None or len(self.bias.shape) != 1:
                raise ValueError("add_bias layer needs a 1-d bias tensor")
        elif self.bias is not None:
            raise ValueError(f"{self.kind} layer takes no bias")

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape-check this layer against `in_shape` and return its output shape."""
        if self.kind == "dense":
            rows, cols = self.weight.shape
            if in_shape != (cols,):
                raise ValueError(f"dense weight {self.weight.shape} cannot consume {in_shape}")
            return (rows,)
        if self.kind == "conv2d":
            cout, cin, kh, kw = self.weight.shape
            if len(in_shape) != 3 or in_shape[0] != cin:
                raise ValueError(f"conv2d weight {self.weight.shape} cannot consume {in_shape}")
            _, h, w = in_shape
            ho = (h + 2 * self.padding - kh) // self.stride + 1
            wo = (w + 2 * self.padding - kw) // self.stride + 1
            if h + 2 * self.padding < kh or w + 2 * self.padding < kw or ho < 1 or wo < 1:
                raise ValueError(f"conv2d kernel {(kh, kw)} does not fit input {in_shape}")
            return (cout, ho, wo)
        if self.kind == "add_bias":
            if in_shape[0] != self.bias.shape[0]:
                raise ValueError(f"bias of {self.bias.shape[0]} cannot consume {in_shape}")
            return in_shape
        if self.kind == "argmax_channel":
            if len(in_shape) != 3:
                raise ValueError("argmax_channel expects a CHW input")
            return in_shape[1:]
        return in_shape  # relu


@dataclass(frozen=True)
class ModelGraph:
    """A validated straight-line model: every layer chains onto the previous."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.layers:
            raise ValueError("model has no layers")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if any(s < 1 for s in self.input_shape):
            raise ValueError(f"bad input shape {self.input_shape}")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "argmax_channel" and shape[0] != self.class_count:
                raise ValueError(
                    f"layer {i}: argmax over {shape[0]} channels but class_count={self.class_count}"
                )
            shape = layer.output_shape(shape)

    def layer_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(input_shape, output_shape) per layer, in order."""
        out = []
        shape = self.input_shape
        for layer in self.layers:
            nxt = layer.output_shape(shape)
            out.append((shape, nxt))
            shape = nxt
        return out

    def output_shape(self) -> tuple[int, ...]:
        return self.layer_shapes()[-1][1]

    def offloadable_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in OFFLOADABLE_KINDS]


@dataclass(frozen=True)
class SegmentationSample:
    """One labeled image: CHW float input + HW integer mask (-1 = background)."""

    image: Tensor
    label: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.label)
        if not np.issubdtype(lab.dtype, np.integer):
            flt = np.asarray(lab, dtype=np.float64)
            if not np.all(flt == np.round(flt)):
                raise ValueError("label mask holds non-integer values")
            lab = flt.astype(np.int64)
        else:
            lab = lab.astype(np.int64)
        if lab.ndim != 2:
            raise ValueError("label mask must be 2-d")
        if lab.size and lab.min() < BACKGROUND:
            raise ValueError(f"label values below {BACKGROUND} are meaningless")
        if len(self.image.shape) != 3 or self.image.shape[1:] != lab.shape:
            raise ValueError(
                f"image {self.image.shape} does not match label {lab.shape}"
            )
        lab.setflags(write=False)
        object.__setattr__(self, "label", lab)


# ---------------------------------------------------------------------------
# float32 reference semantics


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold CHW input into a (cin*kh*kw, ho*wo) patch matrix."""
    xp = _pad_hw(x, padding)
    c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def col2im(
    cols: np.ndarray,
    in_shape: tuple[int, int, int],
    kh: int,
    kw: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of im2col: scatter-add a patch matrix back onto the input grid."""
    c, h, w = in_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    grid = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            grid[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += cols[:, i, j]
    if padding == 0:
        return grid
    return grid[:, padding : padding + h, padding : padding + w]


def conv2d_reference(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Plain float convolution via im2col; the digital baseline for conv layers."""
    cout, cin, kh, kw = weight.shape
    cols = im2col(x, kh, kw, stride, padding)
    out = weight.reshape(cout, cin * kh * kw) @ cols
    _, hp, wp = _pad_hw(x, padding).shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    return out.reshape(cout, ho, wo)


def eval_layer_digital(layer: Layer, x: np.ndarray) -> np.ndarray:
    """One layer of the float32 reference forward pass."""
    x = np.asarray(x, dtype=np.float32)
    if layer.kind == "dense":
        return layer.weight.data @ x
    if layer.kind == "conv2d":
        return conv2d_reference(x, layer.weight.data, layer.stride, layer.padding)
    if layer.kind == "relu":
        return np.maximum(x, np.float32(0))
    if layer.kind == "add_bias":
        b = layer.bias.data
        return x + (b if x.ndim == 1 else b[:, None, None])
    # argmax_channel; ties resolve to the lowest channel index
    return np.argmax(x, axis=0).astype(np.float32)


def reference_forward(model: ModelGraph, image: Tensor) -> Tensor:
    """Run the whole chain in float32 on the host. The accuracy baseline."""
    if image.shape != model.input_shape:
        raise ValueError(f"input {image.shape} does not match model {model.input_shape}")
    x = image.data
    for layer in model.layers:
        x = eval_layer_digital(layer, x)
    return Tensor(x)


# ---------------------------------------------------------------------------
# model JSON


def _tensor_to_json(t: Tensor, external: Path | None, name: str) -> dict:
    if external is None:
        from .tensor import _encode_payload

        return {
            "shape": list(t.shape),
            "format": t.elem_format,
            "data_b64": base64.b64encode(_encode_payload(t)).decode("ascii"),
        }
    fname = f"{name}.pcten"
    save_tensor(t, external / fname)
    return {"tensor_file": fname}


def _tensor_from_json(obj, base_dir: Path, what: str) -> Tensor:
    if not isinstance(obj, dict):
        raise ModelFormatError(f"{what}: tensor entry must be an object")
    if "tensor_file" in obj:
        ref = obj["tensor_file"]
        if not isinstance(ref, str) or Path(ref).is_absolute():
            raise ModelFormatError(f"{what}: tensor_file must be a relative path")
        return load_tensor(base_dir / ref)
    shape = obj.get("shape")
    fmt = obj.get("format")
    data = obj.get("data_b64")
    if fmt not in FORMATS or not isinstance(shape, list) or not isinstance(data, str):
        raise ModelFormatError(f"{what}: malformed inline tensor")
    try:
        raw = base64.b64decode(data, validate=True)
    except Exception as exc:
        raise ModelFormatError(f"{what}: bad base64 payload ({exc})") from exc
    from .tensor import _decode_payload

    count = int(np.prod(shape, dtype=np.int64)) if shape else 0
    itemsize = 4 if fmt == "f32" else 2
    if count < 1 or len(raw) != count * itemsize:
        raise ModelFormatError(f"{what}: payload size does not match shape {shape}")
    try:
        return Tensor(_decode_payload(raw, tuple(shape), fmt), fmt)
    except ValueError as exc:
        raise ModelFormatError(f"{what}: {exc}") from exc


def save_model(model: ModelGraph, path, *, external_weights: bool = False) -> None:
    """Write a model JSON; weights go inline (base64) or as sibling .pcten files."""
    path = Path(path)
    base = path.parent if external_weights else None
    layers = []
    for i, layer in enumerate(model.layers):
        entry: dict = {"kind": layer.kind, "execution_domain": layer.execution_domain}
        if layer.kind == "conv2d":
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
        if layer.weight is not None:
            entry["weight"] = _tensor_to_json(layer.weight, base, f"layer{i:02d}_weight")
        if layer.bias is not None:
            entry["bias"] = _tensor_to_json(layer.bias, base, f"layer{i:02d}_bias")
        layers.append(entry)
    doc = {
        "pcmodel_version": MODEL_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": layers,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> ModelGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: cannot read model ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("pcmodel_version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: missing or unsupported pcmodel_version")
    layers_doc = doc.get("layers")
    in_shape = doc.get("input_shape")
    classes = doc.get("class_count")
    if not isinstance(layers_doc, list) or not isinstance(in_shape, list):
        raise ModelFormatError(f"{path}: malformed model body")
    if not isinstance(classes, int) or isinstance(classes, bool):
        raise ModelFormatError(f"{path}: class_count must be an integer")
    layers = []
    for i, entry in enumerate(layers_doc):
        if not isinstance(entry, dict) or "kind" not in entry:
            raise ModelFormatError(f"{path}: layer {i} is malformed")
        kw: dict = {
            "kind": entry["kind"],
            "execution_domain": entry.get("execution_domain", "digital"),
        }
        if "stride" in entry:
            kw["stride"] = entry["stride"]
        if "padding" in entry:
            kw["padding"] = entry["padding"]
        if "weight" in entry:
            kw["weight"] = _tensor_from_json(entry["weight"], path.parent, f"{path} layer {i} weight")
        if "bias" in entry:
            kw["bias"] = _tensor_from_json(entry["bias"], path.parent, f"{path} layer {i} bias")
        try:
            layers.append(Layer(**kw))
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"{path}: layer {i}: {exc}") from exc
    try:
        return ModelGraph(tuple(layers), tuple(in_shape), classes)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# dataset directories

_IMG_RE = re.compile(r"^img_(\d{4})\.pcten$")


def save_dataset(samples, dirpath) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_tensor(s.image, dirpath / f"img_{i:04d}.pcten")
        save_tensor(Tensor(s.label.astype(np.float32)), dirpath / f"lbl_{i:04d}.pcten")


def load_dataset(dirpath) -> list[SegmentationSample]:
    dirpath = Path(dirpath)
    if not dirpath.is_dir():
        raise ModelFormatError(f"{dirpath}: dataset directory does not exist")
    samples = []
    imgs = sorted(p for p in dirpath.iterdir() if _IMG_RE.match(p.name))
    if not imgs:
        raise ModelFormatError(f"{dirpath}: no img_NNNN.pcten files found")
    for img_path in imgs:
        idx = _IMG_RE.match(img_path.name).group(1)
        lbl_path = dirpath / f"lbl_{idx}.pcten"
        if not lbl_path.exists():
            raise ModelFormatError(f"{dirpath}: {img_path.name} has no matching label")
        image = load_tensor(img_path)
        label = load_tensor(lbl_path)
        try:
            samples.append(SegmentationSample(image, label.data))
        except ValueError as exc:
            raise ModelFormatError(f"{dirpath}: sample {idx}: {exc}") from exc
    return samples
