"""Binary tensor records and checkpoint files.

Tensor record, all little-endian::

    b"MCCL" | version u32 | rank u32 | extents u64 * rank | dtype tag u32 | payload

The payload is the row-major array. Dtype tags: 0 float32, 1 float64, 2 int64, 3 uint8.

Checkpoint file::

    b"MCKP" | version u32 | header length u32 | UTF-8 JSON header | tensor records

The JSON header carries ``config_hash``, ``epoch``, ``seed``, the full ``config`` and the
``tensors`` list naming the records that follow, in order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ContractError

MAGIC = b"MCCL"
CKPT_MAGIC = b"MCKP"
FORMAT_VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def _normalize(arr: np.ndarray) -> np.ndarray:
    kind, size = arr.dtype.kind, arr.dtype.itemsize
    if kind == "b" or (kind == "u" and size == 1):
        return np.ascontiguousarray(arr, dtype="u1")
    if kind == "f" and size in (4, 8):
        return np.ascontiguousarray(arr, dtype="<f4" if size == 4 else "<f8")
    if kind in "iu":
        return np.ascontiguousarray(arr, dtype="<i8")
    raise ContractError(f"unsupported dtype for serialization: {arr.dtype}")


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    arr = _normalize(np.asarray(array))
    dt = arr.dtype
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<I", DTYPE_TAGS[dt]))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContractError("truncated tensor record")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise ContractError("bad tensor magic")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported tensor format version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    (tag,) = struct.unpack("<I", _read_exact(fh, 4))
    if tag not in TAG_DTYPES:
        raise ContractError(f"unknown dtype tag {tag}")
    dt = TAG_DTYPES[tag]
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = _read_exact(fh, n * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header = dict(header, tensors=list(tensors))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            write_tensor(fh, arr)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        version, n = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_exact(fh, n).decode("utf-8"))
        tensors = {name: read_tensor(fh) for name in header["tensors"]}
    return header, tensors
