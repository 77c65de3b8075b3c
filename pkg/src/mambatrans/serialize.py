"""Binary tensor records and named-parameter checkpoints.

Tensor record::

    b"MTT1" | u32 rank | u32 dim * rank | u8 precision (4 or 8) | raw LE scalars

Checkpoint::

    tag (b"MTCKPT1" or b"MTDET1") | u32 header length | header JSON |
    u32 record count | (u32 name length | name | tensor record) * count

The header JSON is written with sorted keys so identical configs give
identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"MTT1"
MODEL_TAG = b"MTCKPT1"
DETECTOR_TAG = b"MTDET1"
_PRECISION = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensor(fp: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype.itemsize not in _PRECISION or arr.dtype.kind != "f":
        raise FormatError(f"unsupported dtype {arr.dtype}")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(struct.pack("<B", arr.dtype.itemsize))
    fp.write(np.ascontiguousarray(arr, dtype=_PRECISION[arr.dtype.itemsize]).tobytes())


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise FormatError("truncated stream")
    return buf


def read_tensor(fp: BinaryIO) -> np.ndarray:
    if _read_exact(fp, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    (rank,) = struct.unpack("<I", _read_exact(fp, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank)) if rank else ()
    (tag,) = struct.unpack("<B", _read_exact(fp, 1))
    if tag not in _PRECISION:
        raise FormatError(f"unknown precision tag {tag}")
    dt = _PRECISION[tag]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fp, count * dt.itemsize), dtype=dt).reshape(shape)
    return data.astype(dt.newbyteorder("="))


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))


def save_checkpoint(path, tag: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fp:
        fp.write(tag)
        fp.write(struct.pack("<I", len(head)))
        fp.write(head)
        fp.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode()
            fp.write(struct.pack("<I", len(raw)))
            fp.write(raw)
            write_tensor(fp, arr)


def load_checkpoint(path, tag: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fp:
        got = fp.read(len(tag))
        if got != tag:
            raise FormatError(f"{path}: expected tag {tag!r}, found {got!r}")
        (hlen,) = struct.unpack("<I", _read_exact(fp, 4))
        header = json.loads(_read_exact(fp, hlen))
        (count,) = struct.unpack("<I", _read_exact(fp, 4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fp, 4))
            name = _read_exact(fp, nlen).decode()
            tensors[name] = read_tensor(fp)
    return header, tensors
