"""Streaming reader/writer for the safetensors container format.

The format is an 8-byte little-endian header length, a JSON header mapping
tensor names to ``{dtype, shape, data_offsets}``, then the raw tensor bytes.
Reading and writing here is chunk-oriented so a merge never holds more than a
few megabytes per tensor in memory, regardless of tensor or shard size.

bfloat16 has no numpy dtype; it is handled as uint16 words with explicit
widen/narrow conversions (round-to-nearest-even, NaNs kept quiet).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import IoFailure

HEADER_LEN_BYTES = 8
INDEX_FILE_NAME = "model.safetensors.index.json"

# dtype tag -> (itemsize, numpy dtype or None when numpy cannot represent it)
DTYPES: dict[str, tuple[int, np.dtype | None]] = {
    "F64": (8, np.dtype(np.float64)),
    "F32": (4, np.dtype(np.float32)),
    "F16": (2, np.dtype(np.float16)),
    "BF16": (2, None),
    "I64": (8, np.dtype(np.int64)),
    "I32": (4, np.dtype(np.int32)),
    "I16": (2, np.dtype(np.int16)),
    "I8": (1, np.dtype(np.int8)),
    "U8": (1, np.dtype(np.uint8)),
    "U16": (2, np.dtype(np.uint16)),
    "U32": (4, np.dtype(np.uint32)),
    "U64": (8, np.dtype(np.uint64)),
    "BOOL": (1, np.dtype(np.bool_)),
    "F8_E4M3": (1, None),
    "F8_E5M2": (1, None),
}

# Tags that participate in merge arithmetic; everything else copies verbatim.
FLOAT_TAGS = ("F64", "F32", "F16", "BF16")


def itemsize(dtype_tag: str) -> int:
    try:
        return DTYPES[dtype_tag][0]
    except KeyError:
        raise IoFailure(f"unsupported tensor dtype {dtype_tag!r}")


def is_mergeable(dtype_tag: str) -> bool:
    return dtype_tag in FLOAT_TAGS


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    start: int  # absolute file offset of the first data byte
    end: int
    shard: str  # shard file name relative to the checkpoint root

    @property
    def nbytes(self) -> int:
        return self.end - self.start

    @property
    def nelements(self) -> int:
        n = 1
        for dim in self.shape:
            n *= dim
        return n


def read_shard_header(path: Path) -> tuple[dict[str, TensorMeta], int]:
    """Parse one shard's header; returns metas keyed by name and the data offset."""
    try:
        with open(path, "rb") as fh:
            raw_len = fh.read(HEADER_LEN_BYTES)
            if len(raw_len) != HEADER_LEN_BYTES:
                raise IoFailure(f"{path}: truncated header length")
            (header_len,) = struct.unpack("<Q", raw_len)
            header_bytes = fh.read(header_len)
            if len(header_bytes) != header_len:
                raise IoFailure(f"{path}: truncated header")
            file_size = path.stat().st_size
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}")
    try:
        header = json.loads(header_bytes)
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{path}: header is not valid JSON: {exc}")

    data_start = HEADER_LEN_BYTES + header_len
    metas: dict[str, TensorMeta] = {}
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        dtype = entry["dtype"]
        shape = tuple(int(d) for d in entry["shape"])
        rel_start, rel_end = entry["data_offsets"]
        meta = TensorMeta(
            name=name,
            dtype=dtype,
            shape=shape,
            start=data_start + rel_start,
            end=data_start + rel_end,
            shard=path.name,
        )
        expected = meta.nelements * itemsize(dtype)
        if meta.nbytes != expected:
            raise IoFailure(
                f"{path}: tensor {name!r} holds {meta.nbytes} bytes, "
                f"shape {shape} x {dtype} needs {expected}"
            )
        if meta.end > file_size:
            raise IoFailure(f"{path}: tensor {name!r} extends past end of file")
        metas[name] = meta
    return metas, data_start


def iter_file_chunks(path: Path, start: int, end: int, chunk_bytes: int) -> Iterator[bytes]:
    """Yield the byte range [start, end) in chunks of at most chunk_bytes."""
    with open(path, "rb") as fh:
        fh.seek(start)
        remaining = end - start
        while remaining > 0:
            chunk = fh.read(min(chunk_bytes, remaining))
            if not chunk:
                raise IoFailure(f"{path}: unexpected end of file at {end - remaining}")
            remaining -= len(chunk)
            yield chunk


class ShardWriter:
    """Write one shard sequentially: header first, then tensor data in order.

    The full tensor list (names, dtypes, shapes) must be known up front, which
    a merge always does because the output mirrors the base checkpoint.
    """

    def __init__(self, path: Path, tensors: list[tuple[str, str, tuple[int, ...]]]):
        self.path = path
        header: dict[str, dict] = {}
        offset = 0
        self._expected: dict[str, int] = {}
        for name, dtype, shape in tensors:
            nbytes = itemsize(dtype)
            for dim in shape:
                nbytes *= dim
            header[name] = {
                "dtype": dtype,
                "shape": list(shape),
                "data_offsets": [offset, offset + nbytes],
            }
            self._expected[name] = nbytes
            offset += nbytes
        self.data_size = offset
        header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
        self._order = [name for name, _, _ in tensors]
        self._cursor = 0
        try:
            self._fh = open(path, "wb")
            self._fh.write(struct.pack("<Q", len(header_bytes)))
            self._fh.write(header_bytes)
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}")

    def write_tensor(self, name: str, chunks: Iterator[bytes]) -> None:
        if self._cursor >= len(self._order) or self._order[self._cursor] != name:
            raise IoFailure(
                f"{self.path}: tensors must be written in header order; "
                f"expected {self._order[self._cursor] if self._cursor < len(self._order) else None!r}, "
                f"got {name!r}"
            )
        written = 0
        try:
            for chunk in chunks:
                self._fh.write(chunk)
                written += len(chunk)
        except OSError as exc:
            raise IoFailure(f"{self.path}: {exc}")
        if written != self._expected[name]:
            raise IoFailure(
                f"{self.path}: tensor {name!r} wrote {written} bytes, "
                f"expected {self._expected[name]}"
            )
        self._cursor += 1

    def close(self) -> None:
        if self._cursor != len(self._order):
            raise IoFailure(
                f"{self.path}: closed after {self._cursor} of {len(self._order)} tensors"
            )
        self._fh.close()

    def __enter__(self) -> "ShardWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def write_index(root: Path, weight_map: dict[str, str], total_size: int) -> None:
    index = {"metadata": {"total_size": total_size}, "weight_map": weight_map}
    (root / INDEX_FILE_NAME).write_text(
        json.dumps(index, indent=2, sort_keys=True), encoding="utf-8"
    )


# --------------------------------------------------------------------------- #
# bfloat16 <-> float32
# --------------------------------------------------------------------------- #


def bf16_to_f32(words: np.ndarray) -> np.ndarray:
    """Widen bfloat16 (as uint16 words) to float32 exactly."""
    return (words.astype(np.uint32) << np.uint32(16)).view(np.float32)


def f32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Narrow float32 to bfloat16 words with round-to-nearest-even."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    bits = values.view(np.uint32)
    bias = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    rounded = ((bits + bias) >> np.uint32(16)).astype(np.uint16)
    nan_mask = np.isnan(values)
    if nan_mask.any():
        quiet = ((bits >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16)
        rounded = np.where(nan_mask, quiet, rounded)
    return rounded


def bytes_to_accum(buf: bytes, dtype_tag: str, accum: np.dtype) -> np.ndarray:
    """Decode raw tensor bytes into the accumulation dtype."""
    if dtype_tag == "BF16":
        return bf16_to_f32(np.frombuffer(buf, dtype=np.uint16)).astype(accum, copy=False)
    np_dtype = DTYPES[dtype_tag][1]
    if np_dtype is None:
        raise IoFailure(f"cannot decode dtype {dtype_tag!r} for arithmetic")
    return np.frombuffer(buf, dtype=np_dtype).astype(accum, copy=False)


def accum_to_bytes(values: np.ndarray, dtype_tag: str) -> bytes:
    """Encode accumulated values back to the source dtype's raw bytes."""
    if dtype_tag == "BF16":
        return f32_to_bf16(values.astype(np.float32, copy=False)).tobytes()
    np_dtype = DTYPES[dtype_tag][1]
    if np_dtype is None:
        raise IoFailure(f"cannot encode dtype {dtype_tag!r} from arithmetic")
    return values.astype(np_dtype, copy=False).tobytes()
