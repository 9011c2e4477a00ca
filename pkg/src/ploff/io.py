"""Versioned binary containers shared by datasets, checkpoints, and indexes.

Layout conventions (all little-endian):
  * a 5-byte ASCII magic identifying the container kind,
  * one JSON header line (sorted keys, terminated by ``\\n``),
  * a container-specific binary payload.

``PLCK1`` (checkpoints) stores named tensors after the header; each tensor is
encoded as u16 name length, utf-8 name, u8 ndim, ndim x u32 dims, then the
row-major payload. Tensor dtype is recorded in the header (float32 for
checkpoints, float64 where exactness matters).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import DataFormatError

CHECKPOINT_MAGIC = b"PLCK1"

_DTYPES = {"float32": np.float32, "float64": np.float64, "uint32": np.uint32}


def write_header(fh: BinaryIO, magic: bytes, header: dict) -> None:
    if len(magic) != 5:
        raise ValueError("magic must be exactly 5 bytes")
    fh.write(magic)
    fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    fh.write(b"\n")


def read_header(fh: BinaryIO, magic: bytes) -> dict:
    got = fh.read(5)
    if got != magic:
        raise DataFormatError(f"bad magic: expected {magic!r}, got {got!r}")
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise DataFormatError("truncated header line")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict):
        raise DataFormatError("header is not a JSON object")
    return header


def read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated payload: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(fh: BinaryIO, name: str, arr: np.ndarray, dtype: str) -> None:
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(data.tobytes())


def read_tensor(fh: BinaryIO, dtype: str) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", read_exact(fh, 2))
    name = read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", read_exact(fh, 4))[0] for _ in range(ndim))
    np_dtype = _DTYPES[dtype]
    count = int(np.prod(shape)) if shape else 1
    raw = read_exact(fh, count * np.dtype(np_dtype).itemsize)
    arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
    return name, arr


def save_checkpoint(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a PLCK1 container. Tensors are stored sorted by name (float32)."""
    names = sorted(tensors)
    header = dict(meta)
    header["tensor_names"] = names
    header["dtype"] = "float32"
    with open(path, "wb") as fh:
        write_header(fh, CHECKPOINT_MAGIC, header)
        for name in names:
            write_tensor(fh, name, tensors[name], "float32")


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a PLCK1 container; returns (metadata, tensors as float64 arrays)."""
    with open(path, "rb") as fh:
        header = read_header(fh, CHECKPOINT_MAGIC)
        names = header.get("tensor_names")
        dtype = header.get("dtype", "float32")
        if not isinstance(names, list):
            raise DataFormatError("checkpoint header missing tensor_names")
        if dtype not in _DTYPES:
            raise DataFormatError(f"unknown tensor dtype {dtype!r}")
        tensors: dict[str, np.ndarray] = {}
        for expected in names:
            name, arr = read_tensor(fh, dtype)
            if name != expected:
                raise DataFormatError(f"tensor order mismatch: {name!r} != {expected!r}")
            tensors[name] = arr.astype(np.float64)
        if fh.read(1):
            raise DataFormatError("trailing bytes after last tensor")
    return header, tensors


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
