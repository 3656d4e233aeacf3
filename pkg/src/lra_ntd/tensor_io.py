"""
Tensor and Tucker model files.

Binary tensor record (little-endian):

    magic   4 bytes   b"LNTD"
    version uint32    1
    order   uint32    N
    extents uint64[N]
    data    float64[prod(extents)], first index fastest

Tucker model file:

    magic   4 bytes   b"LNTM"
    version uint32    1
    order   uint32    N
    fixed   uint8[N]  1 where the factor is a fixed identity
    core    one tensor record
    factors N tensor records of order 2

Text fixtures (extension .txt): the first line holds the extents separated by
whitespace, followed by one scalar per line in storage order. Lines starting
with '#' are ignored.
"""
import io
import os
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .tensor_core import DenseTensor, ShapeError, as_tensor

TENSOR_MAGIC = b"LNTD"
MODEL_MAGIC = b"LNTM"
FORMAT_VERSION = 1

PathLike = Union[str, os.PathLike]


def _write_tensor_record(stream: BinaryIO, t: DenseTensor) -> None:
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<II", FORMAT_VERSION, t.ndim))
    stream.write(np.asarray(t.shape, dtype="<u8").tobytes())
    stream.write(np.ravel(t, order="F").astype("<f8").tobytes())


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise ValueError("Unexpected end of file")
    return data


def _read_tensor_record(stream: BinaryIO) -> DenseTensor:
    if _read_exact(stream, 4) != TENSOR_MAGIC:
        raise ValueError("Not a tensor record (bad magic)")
    version, order = struct.unpack("<II", _read_exact(stream, 8))
    if version != FORMAT_VERSION:
        raise ValueError(f"Unsupported tensor format version {version}")
    if order < 1:
        raise ValueError("Tensor record has order 0")
    shape = tuple(int(s) for s in np.frombuffer(_read_exact(stream, 8 * order), dtype="<u8"))
    count = int(np.prod(shape))
    data = np.frombuffer(_read_exact(stream, 8 * count), dtype="<f8").copy()
    return as_tensor(np.reshape(data, shape, order="F"))


def save_tensor(path: PathLike, t: DenseTensor) -> None:
    """Write a tensor; `.txt` selects the text format."""
    t = as_tensor(t)
    if Path(path).suffix == ".txt":
        with open(path, "w") as f:
            f.write(" ".join(str(s) for s in t.shape) + "\n")
            for value in np.ravel(t, order="F"):
                f.write(f"{float(value)!r}\n")
        return
    with open(path, "wb") as f:
        _write_tensor_record(f, t)


def load_tensor(path: PathLike) -> DenseTensor:
    if Path(path).suffix == ".txt":
        return _load_text_tensor(path)
    with open(path, "rb") as f:
        t = _read_tensor_record(f)
        if f.read(1):
            raise ValueError(f"Trailing data after tensor record in {path}")
    return t


def _load_text_tensor(path: PathLike) -> DenseTensor:
    with open(path, "r") as f:
        lines = [line.strip() for line in f if line.strip() and not line.startswith("#")]
    if not lines:
        raise ValueError(f"Empty tensor file: {path}")
    shape = tuple(int(s) for s in lines[0].split())
    values = np.array([float(v) for v in lines[1:]])
    if values.size != int(np.prod(shape)):
        raise ShapeError(
            f"{path} declares shape {shape} but holds {values.size} values"
        )
    return as_tensor(np.reshape(values, shape, order="F"))


def model_to_bytes(core: DenseTensor, factors: list, fixed: list) -> bytes:
    buffer = io.BytesIO()
    buffer.write(MODEL_MAGIC)
    buffer.write(struct.pack("<II", FORMAT_VERSION, core.ndim))
    buffer.write(bytes(1 if flag else 0 for flag in fixed))
    _write_tensor_record(buffer, core)
    for factor in factors:
        _write_tensor_record(buffer, factor)
    return buffer.getvalue()


def model_from_bytes(data: bytes) -> tuple[DenseTensor, list, list]:
    stream = io.BytesIO(data)
    if _read_exact(stream, 4) != MODEL_MAGIC:
        raise ValueError("Not a Tucker model file (bad magic)")
    version, order = struct.unpack("<II", _read_exact(stream, 8))
    if version != FORMAT_VERSION:
        raise ValueError(f"Unsupported model format version {version}")
    fixed = [bool(b) for b in _read_exact(stream, order)]
    core = _read_tensor_record(stream)
    factors = [_read_tensor_record(stream) for _ in range(order)]
    if core.ndim != order or any(f.ndim != 2 for f in factors):
        raise ShapeError("Model file holds records of the wrong order")
    return core, factors, fixed
