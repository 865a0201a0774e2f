"""Dense float tensors and the .pcten on-disk format.

Everything the simulator touches is carried as float32, with bfloat16 existing
as a *storage/rounding semantic*: a bf16 tensor is a float32 array whose values
all survive truncation to the top 16 bits of their float32 encoding.  Rounding
float32 -> bfloat16 is round-to-nearest-even, done with the usual bit trick.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PCTEN01\x00"
FORMATS = ("f32", "bf16")

# refuse to allocate silly amounts from file headers; the tool is desk-scale
_MAX_ELEMENTS = 1 << 31


class TensorFileError(Exception):
    """Raised for malformed, truncated, or inconsistent tensor files."""


def bf16_round(x):
    """Round float32 value(s) to the nearest bfloat16, ties to even.

    Works on scalars and arrays; always returns float32 (scalar inputs come
    back as a python float).  Inputs wider than float32 are narrowed first,
    which is the only domain the pipeline uses.  NaN payloads pass through
    untouched; +/-inf are already bf16-representable.
    """
    arr = np.asarray(x, dtype=np.float32)
    bits = arr.view(np.uint32).astype(np.uint64)
    # add half an ulp of the 16-bit target (plus the tie-break bit) and truncate
    rounded = (bits + 0x7FFF + ((bits >> np.uint64(16)) & np.uint64(1))) & np.uint64(
        0xFFFF0000
    )
    out = rounded.astype(np.uint32).view(np.float32)
    out = np.where(np.isnan(arr), arr, out)
    if np.ndim(x) == 0:
        return float(out)
    return out


def is_bf16_exact(arr) -> bool:
    """True if every value of `arr` is exactly representable in bfloat16."""
    arr = np.asarray(arr, dtype=np.float32)
    bits = arr.view(np.uint32)
    low = bits & np.uint32(0xFFFF)
    return bool(np.all((low == 0) | np.isnan(arr)))


@dataclass(frozen=True, eq=False)
class Tensor:
    """An immutable dense float tensor.

    data is held as a read-only float32 ndarray regardless of elem_format;
    a bf16 tensor must consist of bf16-representable values only.
    """

    data: np.ndarray
    elem_format: str = "f32"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim < 1:
            raise ValueError("tensor needs at least one axis")
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        if self.elem_format not in FORMATS:
            raise ValueError(f"unknown element format {self.elem_format!r}")
        if self.elem_format == "bf16" and not is_bf16_exact(arr):
            raise ValueError("bf16 tensor holds values not representable in bfloat16")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)


def _encode_payload(t: Tensor) -> bytes:
    if t.elem_format == "f32":
        return t.data.astype("<f4").tobytes()
    bits = t.data.view(np.uint32)
    return (bits >> np.uint32(16)).astype("<u2").tobytes()


def _decode_payload(raw: bytes, shape: tuple[int, ...], fmt: str) -> np.ndarray:
    if fmt == "f32":
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    else:
        half = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
        arr = (half << np.uint32(16)).view(np.float32)
    return arr.reshape(shape)


def save_tensor(t: Tensor, path) -> None:
    """Write `t` to `path` in the .pcten format (always little-endian)."""
    header = json.dumps(
        {"shape": list(t.shape), "format": t.elem_format},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(header)) + header + _encode_payload(t)
    Path(path).write_bytes(blob)


def load_tensor(path) -> Tensor:
    """Read a .pcten file, validating magic, header, and payload size."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read tensor file {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 4:
        raise TensorFileError(f"{path}: file too short to be a tensor file")
    if blob[: len(MAGIC)] != MAGIC:
        raise TensorFileError(f"{path}: bad magic, not a tensor file")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    body = len(MAGIC) + 4
    if body + hlen > len(blob):
        raise TensorFileError(f"{path}: truncated header")
    try:
        header = json.loads(blob[body : body + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path}: unparseable header ({exc})") from exc
    if not isinstance(header, dict):
        raise TensorFileError(f"{path}: header must be a JSON object")
    shape = header.get("shape")
    fmt = header.get("format")
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in shape)
    ):
        raise TensorFileError(f"{path}: bad shape field {shape!r}")
    if fmt not in FORMATS:
        raise TensorFileError(f"{path}: unknown format {fmt!r}")
    count = 1
    for s in shape:
        count *= s
        if count > _MAX_ELEMENTS:
            raise TensorFileError(f"{path}: extent overflow, {shape} is not desk-scale")
    itemsize = 4 if fmt == "f32" else 2
    payload = blob[body + hlen :]
    if len(payload) != count * itemsize:
        raise TensorFileError(
            f"{path}: payload is {len(payload)} bytes, expected {count * itemsize}"
        )
    return Tensor(_decode_payload(payload, tuple(shape), fmt), fmt)
