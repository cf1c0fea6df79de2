"""Reading and writing checkpoints in the EVC1 container.

Layout (little-endian)::

    b"EVC1" | u64 header length H | H bytes UTF-8 JSON header | data section

The header is ``{"metadata": {str: str}, "tensors": {name: {"dtype", "shape",
"offset", "nbytes"}}}`` with offsets relative to the start of the data section.
The canonical form written here sorts tensors by name, packs their data in that
order without gaps and serializes the header with sorted keys, so a checkpoint
value maps to exactly one byte string.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"EVC1"
_PREFIX = struct.Struct("<4sQ")

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def dtype_name(dtype) -> str:
    try:
        return _DTYPE_NAMES[np.dtype(dtype).newbyteorder("=")]
    except KeyError:
        raise DataError(f"unsupported dtype {np.dtype(dtype)}; expected float32 or float64") from None


class _LazyTensors(Mapping):
    """Tensor map backed by an EVC1 file; each access reads one tensor from disk."""

    def __init__(self, path: Path, data_start: int, entries: dict[str, dict]):
        self._path = path
        self._data_start = data_start
        self._entries = entries

    def info(self, name: str) -> tuple[str, tuple[int, ...]]:
        e = self._entries[name]
        return e["dtype"], tuple(e["shape"])

    def __getitem__(self, name: str) -> np.ndarray:
        e = self._entries[name]
        dt = DTYPES[e["dtype"]]
        count = e["nbytes"] // dt.itemsize
        with open(self._path, "rb") as fh:
            fh.seek(self._data_start + e["offset"])
            arr = np.fromfile(fh, dtype=dt, count=count)
        return arr.astype(dt.newbyteorder("="), copy=False).reshape(e["shape"])

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(eq=False)
class Checkpoint:
    """Named float tensors plus free-form string metadata.

    ``tensors`` may be given as a mapping or as ``(name, array)`` pairs; pairs
    are checked for duplicate names.
    """

    tensors: Mapping[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.tensors, Mapping):
            pairs = list(self.tensors)
            out: dict[str, np.ndarray] = {}
            for name, arr in pairs:
                if name in out:
                    raise DataError(f"duplicate tensor name {name!r}")
                out[name] = arr
            self.tensors = out
        self.metadata = dict(self.metadata)

    def info(self, name: str) -> tuple[str, tuple[int, ...]]:
        """(dtype name, shape) of one tensor without loading lazy data."""
        if isinstance(self.tensors, _LazyTensors):
            return self.tensors.info(name)
        arr = np.asarray(self.tensors[name])
        return dtype_name(arr.dtype), tuple(arr.shape)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def validate(self) -> None:
        for name in self.tensors:
            if not isinstance(name, str) or not name:
                raise DataError(f"invalid tensor name {name!r}")
            self.info(name)
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise DataError(f"metadata must map str to str, got {k!r}: {v!r}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata != other.metadata or set(self.tensors) != set(other.tensors):
            return False
        for name in self.tensors:
            a = np.asarray(self.tensors[name])
            b = np.asarray(other.tensors[name])
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if a.tobytes() != b.tobytes():
                return False
        return True


@dataclass
class SchemaReport:
    only_in_a: list[str] = field(default_factory=list)
    only_in_b: list[str] = field(default_factory=list)
    shape_mismatches: list[tuple[str, tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)
    dtype_mismatches: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.only_in_a or self.only_in_b or self.shape_mismatches or self.dtype_mismatches)

    def __bool__(self) -> bool:
        return not self.empty


def _header_bytes(metadata: Mapping[str, str], entries: Mapping[str, dict]) -> bytes:
    doc = {"metadata": dict(metadata), "tensors": dict(entries)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _canonical_layout(ckpt: Checkpoint) -> dict[str, dict]:
    entries = {}
    offset = 0
    for name in ckpt.names():
        dt, shape = ckpt.info(name)
        nbytes = math.prod(shape) * DTYPES[dt].itemsize
        entries[name] = {"dtype": dt, "nbytes": nbytes, "offset": offset, "shape": list(shape)}
        offset += nbytes
    return entries


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Canonical serialization held in memory. Intended for small checkpoints."""
    ckpt.validate()
    entries = _canonical_layout(ckpt)
    header = _header_bytes(ckpt.metadata, entries)
    parts = [_PREFIX.pack(MAGIC, len(header)), header]
    for name in entries:
        parts.append(np.ascontiguousarray(ckpt.tensors[name], dtype=DTYPES[entries[name]["dtype"]]).tobytes())
    return b"".join(parts)


def write_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write ``ckpt`` in canonical form, one tensor at a time.

    The file is staged next to ``path`` and moved into place, so a failure
    never leaves a partial checkpoint behind.
    """
    ckpt.validate()
    entries = _canonical_layout(ckpt)
    header = _header_bytes(ckpt.metadata, entries)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, len(header)))
            fh.write(header)
            for name, e in entries.items():
                arr = np.asarray(ckpt.tensors[name])
                if tuple(arr.shape) != tuple(e["shape"]):
                    raise DataError(f"tensor {name!r} changed shape during write")
                fh.write(np.ascontiguousarray(arr, dtype=DTYPES[e["dtype"]]).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise FormatError(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def _is_uint(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def _parse_header(raw: bytes, data_len: int) -> tuple[dict[str, str], dict[str, dict]]:
    try:
        doc = json.loads(raw.decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header JSON: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"metadata", "tensors"}:
        raise FormatError("header must be an object with exactly 'metadata' and 'tensors'")
    metadata, tensors = doc["metadata"], doc["tensors"]
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise FormatError("metadata must map strings to strings")
    if not isinstance(tensors, dict):
        raise FormatError("'tensors' must be an object")

    spans = []
    for name, e in tensors.items():
        if not name:
            raise FormatError("empty tensor name")
        if not isinstance(e, dict) or set(e) != {"dtype", "shape", "offset", "nbytes"}:
            raise FormatError(f"tensor {name!r}: entry must have dtype, shape, offset, nbytes")
        if e["dtype"] not in DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype {e['dtype']!r}")
        shape = e["shape"]
        if not isinstance(shape, list) or not all(_is_uint(d) for d in shape):
            raise FormatError(f"tensor {name!r}: shape must be a list of non-negative integers")
        if not (_is_uint(e["offset"]) and _is_uint(e["nbytes"])):
            raise FormatError(f"tensor {name!r}: offset and nbytes must be non-negative integers")
        expected = math.prod(shape) * DTYPES[e["dtype"]].itemsize
        if e["nbytes"] != expected:
            raise FormatError(f"tensor {name!r}: nbytes {e['nbytes']} != {expected} implied by shape and dtype")
        if e["offset"] + e["nbytes"] > data_len:
            raise FormatError(f"truncated data section: tensor {name!r} ends past end of file")
        if e["nbytes"]:
            spans.append((e["offset"], e["offset"] + e["nbytes"], name))

    spans.sort()
    for (_, end, prev), (start, _, name) in zip(spans, spans[1:]):
        if start < end:
            raise FormatError(f"overlapping data for tensors {prev!r} and {name!r}")
    return metadata, tensors


def _read_layout(path: Path) -> tuple[int, dict[str, str], dict[str, dict]]:
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise FormatError("truncated header: file shorter than the fixed prefix")
        magic, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if hlen > size - _PREFIX.size:
            raise FormatError("truncated header: declared header length exceeds file size")
        raw = fh.read(hlen)
    data_start = _PREFIX.size + hlen
    metadata, entries = _parse_header(raw, size - data_start)
    return data_start, metadata, entries


def read_checkpoint(path: str | os.PathLike, lazy: bool = False) -> Checkpoint:
    """Read an EVC1 file.

    With ``lazy=True`` only the header is parsed up front and every tensor
    access goes to disk, which keeps memory at the size of one tensor.
    """
    path = Path(path)
    data_start, metadata, entries = _read_layout(path)
    tensors = _LazyTensors(path, data_start, entries)
    if not lazy:
        tensors = {name: tensors[name] for name in entries}
    return Checkpoint(tensors, metadata)


def diff_schemas(a: Checkpoint, b: Checkpoint) -> SchemaReport:
    report = SchemaReport(
        only_in_a=sorted(set(a.tensors) - set(b.tensors)),
        only_in_b=sorted(set(b.tensors) - set(a.tensors)),
    )
    for name in sorted(set(a.tensors) & set(b.tensors)):
        (da, sa), (db, sb) = a.info(name), b.info(name)
        if sa != sb:
            report.shape_mismatches.append((name, sa, sb))
        if da != db:
            report.dtype_mismatches.append((name, da, db))
    return report

