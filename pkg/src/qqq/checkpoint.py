"""Self-describing binary tensor container.

Layout: 4-byte magic "QQQ1", little-endian u64 header length, UTF-8 JSON
header, then raw little-endian tensor data. The data section begins at the
first 64-byte boundary after the header; tensor offsets are relative to that
start and are themselves 64-byte aligned and non-overlapping.

Header schema:
    {"tensors": {name: {"dtype": "f32|f16|i8|i4p", "shape": [...],
                        "offset": int, "nbytes": int, ("rows": int)}},
     "metadata": {...}}

Packed-INT4 tensors ("i4p") store the byte layout of quantize.pack_i4; their
"shape" is the packed byte shape and "rows" carries the true logical K.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CheckpointFormatError

__all__ = ["MAGIC", "TensorRecord", "Checkpoint", "write_checkpoint", "read_checkpoint"]

MAGIC = b"QQQ1"
ALIGN = 64

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f16": np.dtype("<f2"),
    "i8": np.dtype("i1"),
    "i4p": np.dtype("u1"),
}


@dataclass
class TensorRecord:
    dtype: str
    array: np.ndarray
    rows: Optional[int] = None  # true K for i4p tensors

    def __post_init__(self) -> None:
        if self.dtype not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype {self.dtype!r}")
        self.array = np.ascontiguousarray(self.array, dtype=_DTYPES[self.dtype])
        if self.dtype == "i4p" and self.rows is None:
            raise CheckpointFormatError("i4p tensor requires a true row count")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorRecord):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.rows == other.rows
            and self.array.shape == other.array.shape
            and bool(np.array_equal(self.array, other.array))
        )


@dataclass
class Checkpoint:
    tensors: dict[str, TensorRecord] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, dtype: str, array: np.ndarray, rows: Optional[int] = None) -> None:
        self.tensors[name] = TensorRecord(dtype=dtype, array=array, rows=rows)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.tensors == other.tensors and self.metadata == other.metadata


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Serialize a checkpoint; byte output is a pure function of its content."""
    entries: dict[str, dict] = {}
    offset = 0
    order: list[tuple[str, np.ndarray]] = []
    # Canonical order: tensors are laid out sorted by name, so the same
    # content always produces the same bytes regardless of insertion order.
    for name, rec in sorted(ckpt.tensors.items()):
        nbytes = rec.array.nbytes
        entry = {
            "dtype": rec.dtype,
            "shape": list(rec.array.shape),
            "offset": offset,
            "nbytes": nbytes,
        }
        if rec.rows is not None:
            entry["rows"] = rec.rows
        entries[name] = entry
        order.append((name, rec.array))
        offset = _align(offset + nbytes)

    header = json.dumps(
        {"tensors": entries, "metadata": ckpt.metadata}, sort_keys=True
    ).encode("utf-8")
    data_start = _align(len(MAGIC) + 8 + len(header))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(b"\0" * (data_start - len(MAGIC) - 8 - len(header)))
        pos = 0
        for name, arr in order:
            pad = entries[name]["offset"] - pos
            f.write(b"\0" * pad)
            f.write(arr.tobytes())
            pos = entries[name]["offset"] + arr.nbytes


def read_checkpoint(path: str) -> Checkpoint:
    """Parse and validate a checkpoint file; raises on any structural defect."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic: {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointFormatError("file truncated before header length")
    (header_len,) = struct.unpack("<Q", blob[4:12])
    if 12 + header_len > len(blob):
        raise CheckpointFormatError("file truncated inside header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise CheckpointFormatError("header missing tensor index")

    data_start = _align(12 + header_len)
    data = blob[data_start:]
    ckpt = Checkpoint(metadata=header.get("metadata", {}))
    spans: list[tuple[int, int, str]] = []
    for name, entry in header["tensors"].items():
        dtype = entry.get("dtype")
        if dtype not in _DTYPES:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype {dtype!r}")
        offset = int(entry["offset"])
        nbytes = int(entry["nbytes"])
        shape = tuple(int(d) for d in entry["shape"])
        if offset % ALIGN != 0:
            raise CheckpointFormatError(f"tensor {name!r}: offset not {ALIGN}-byte aligned")
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
        if expected != nbytes:
            raise CheckpointFormatError(f"tensor {name!r}: nbytes does not match shape")
        if offset + nbytes > len(data):
            raise CheckpointFormatError(f"tensor {name!r}: data extends past end of file")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(
            data[offset : offset + nbytes], dtype=_DTYPES[dtype]
        ).reshape(shape)
        ckpt.tensors[name] = TensorRecord(
            dtype=dtype, array=arr.copy(), rows=entry.get("rows")
        )
    spans.sort()
    for (a0, a1, n0), (b0, _b1, n1) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointFormatError(f"tensors {n0!r} and {n1!r} overlap")
    return ckpt
