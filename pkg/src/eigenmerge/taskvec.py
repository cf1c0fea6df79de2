"""Flattening checkpoints into task vectors and applying them back.

A :class:`FlattenSchema` fixes which tensors take part and in what order
(lexicographic by name, row-major inside each tensor). Every
:class:`FlatVector` carries the 64-bit fingerprint of the schema it was built
under so that vectors from different filters cannot be mixed silently.
"""

from __future__ import annotations

import fnmatch
import json
import math
import os
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ckptio import DTYPES, Checkpoint
from .errors import DataError, FormatError, NumericError, UsageError

PROVENANCE_KEY = "eigenmerge.provenance"

EVV_MAGIC = b"EVV1"
_EVV_HEADER = struct.Struct("<4sQQ")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _check_pattern(pattern: str) -> None:
    if not isinstance(pattern, str) or not pattern:
        raise UsageError(f"invalid filter pattern {pattern!r}")
    depth = 0
    for ch in pattern:
        if ch == "[":
            depth += 1
        elif ch == "]" and depth:
            depth -= 1
    if depth:
        raise UsageError(f"unbalanced '[' in filter pattern {pattern!r}")


@dataclass(frozen=True)
class ParamFilter:
    """Glob patterns selecting the fine-tuned (speaker-dependent) tensors."""

    include: tuple[str, ...] = ("*",)
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "include", tuple(self.include))
        object.__setattr__(self, "exclude", tuple(self.exclude))
        for p in self.include + self.exclude:
            _check_pattern(p)

    def matches(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.include) and not any(
            fnmatch.fnmatchcase(name, p) for p in self.exclude
        )


@dataclass(frozen=True)
class SchemaEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class FlattenSchema:
    entries: tuple[SchemaEntry, ...]

    @property
    def total_dim(self) -> int:
        if not self.entries:
            return 0
        last = self.entries[-1]
        return last.offset + last.size

    @property
    def fingerprint(self) -> int:
        return fnv1a64(self.canonical_json().encode("utf-8"))

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def canonical_json(self) -> str:
        return canonical_json([[e.name, list(e.shape), e.dtype, e.offset] for e in self.entries])

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"name": e.name, "shape": list(e.shape), "dtype": e.dtype, "offset": e.offset} for e in self.entries
            ],
            "total_dim": self.total_dim,
            "fingerprint": f"{self.fingerprint:016x}",
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FlattenSchema:
        entries = tuple(SchemaEntry(e["name"], tuple(e["shape"]), e["dtype"], e["offset"]) for e in doc["entries"])
        schema = cls(entries)
        if "fingerprint" in doc and doc["fingerprint"] != f"{schema.fingerprint:016x}":
            raise FormatError("schema fingerprint does not match its entries")
        return schema


def derive_schema(pre: Checkpoint, filt: ParamFilter | None = None) -> FlattenSchema:
    filt = filt or ParamFilter()
    names = sorted(n for n in pre.tensors if filt.matches(n))
    if not names:
        raise DataError(f"filter include={list(filt.include)} exclude={list(filt.exclude)} selects no tensors")
    entries = []
    offset = 0
    for name in names:
        dt, shape = pre.info(name)
        entries.append(SchemaEntry(name, shape, dt, offset))
        offset += math.prod(shape)
    return FlattenSchema(tuple(entries))


@dataclass(eq=False)
class FlatVector:
    """Dense f64 vector in schema order. ``fingerprint == 0`` means no schema."""

    values: np.ndarray
    fingerprint: int = 0
    label: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not isinstance(self.values, np.memmap):
            self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DataError("flat vectors must be one-dimensional")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class FlatVectorWriter:
    """Appends values to an EVV1 file chunk by chunk."""

    def __init__(self, path: str | os.PathLike, dim: int, fingerprint: int):
        self.path = Path(path)
        self.dim = dim
        self._written = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_EVV_HEADER.pack(EVV_MAGIC, dim, fingerprint))

    def write(self, chunk: np.ndarray) -> None:
        chunk = np.ascontiguousarray(chunk, dtype="<f8").ravel()
        if self._written + chunk.size > self.dim:
            raise DataError(f"{self.path}: more values written than the declared dim {self.dim}")
        self._fh.write(chunk.tobytes())
        self._written += chunk.size

    def close(self) -> None:
        self._fh.close()
        if self._written != self.dim:
            raise DataError(f"{self.path}: wrote {self._written} values, declared {self.dim}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def write_flat_vector(vec: FlatVector, path: str | os.PathLike) -> None:
    with FlatVectorWriter(path, vec.dim, vec.fingerprint) as w:
        w.write(vec.values)


def read_evv_header(path: str | os.PathLike) -> tuple[int, int]:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(_EVV_HEADER.size)
    if len(raw) < _EVV_HEADER.size:
        raise FormatError(f"{path}: truncated EVV1 header")
    magic, dim, fp = _EVV_HEADER.unpack(raw)
    if magic != EVV_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EVV_MAGIC!r}")
    if path.stat().st_size != _EVV_HEADER.size + 8 * dim:
        raise FormatError(f"{path}: file size does not match declared dim {dim}")
    return dim, fp


def read_flat_vector(path: str | os.PathLike, mmap: bool = False) -> FlatVector:
    """Read an EVV1 file; ``mmap=True`` maps the values read-only instead of loading them."""
    dim, fp = read_evv_header(path)
    label = Path(path).stem
    if mmap and dim:
        values = np.memmap(path, dtype="<f8", mode="r", offset=_EVV_HEADER.size, shape=(dim,))
        return FlatVector(values, fp, label)
    with open(path, "rb") as fh:
        fh.seek(_EVV_HEADER.size)
        values = np.fromfile(fh, dtype="<f8", count=dim)
    return FlatVector(values.astype(np.float64, copy=False), fp, label)


def require_tensor(ckpt: Checkpoint, entry: SchemaEntry, role: str) -> np.ndarray:
    if entry.name not in ckpt.tensors:
        raise DataError(f"{role} checkpoint is missing tensor {entry.name!r}")
    _, shape = ckpt.info(entry.name)
    if shape != entry.shape:
        raise DataError(f"{role} tensor {entry.name!r} has shape {list(shape)}, schema expects {list(entry.shape)}")
    return np.asarray(ckpt.tensors[entry.name])


def check_finite(values: np.ndarray, name: str, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise NumericError(f"non-finite {what} in tensor {name!r} at flat index {idx}")


def extract_task_vector(
    ft: Checkpoint,
    pre: Checkpoint,
    schema: FlattenSchema,
    out: str | os.PathLike | None = None,
) -> FlatVector:
    """tau = ft - pre over the schema, accumulated in f64 one tensor at a time.

    If ``out`` is given the vector is streamed to that EVV1 file and returned
    memory-mapped.
    """
    fp = schema.fingerprint
    writer = FlatVectorWriter(out, schema.total_dim, fp) if out is not None else None
    values = None if writer else np.empty(schema.total_dim, dtype=np.float64)
    try:
        for e in schema.entries:
            a = require_tensor(ft, e, "fine-tuned").astype(np.float64).ravel()
            b = require_tensor(pre, e, "pre-trained").astype(np.float64).ravel()
            check_finite(a, e.name, "fine-tuned parameter")
            check_finite(b, e.name, "pre-trained parameter")
            diff = a - b
            if writer:
                writer.write(diff)
            else:
                values[e.offset : e.offset + e.size] = diff
    except BaseException:
        if writer:
            writer._fh.close()
            os.unlink(writer.path)
        raise
    if writer:
        writer.close()
        return read_flat_vector(out, mmap=True)
    return FlatVector(values, fp)


def check_fingerprint(vec: FlatVector, schema: FlattenSchema) -> None:
    if vec.fingerprint != schema.fingerprint:
        raise DataError(
            f"fingerprint mismatch: vector {vec.fingerprint:016x} vs schema {schema.fingerprint:016x}"
        )
    if vec.dim != schema.total_dim:
        raise DataError(f"vector has dim {vec.dim}, schema has {schema.total_dim}")


def add_to_checkpoint(
    pre: Checkpoint,
    delta: np.ndarray,
    schema: FlattenSchema,
    provenance: dict,
) -> Checkpoint:
    """pre + delta on the schema subset; other tensors are passed through untouched.

    Sums are formed in f64 and stored in the pre-trained tensor's dtype.
    """
    tensors = {name: pre.tensors[name] for name in pre.tensors}
    for e in schema.entries:
        base = require_tensor(pre, e, "pre-trained")
        new = base.astype(np.float64).ravel() + delta[e.offset : e.offset + e.size]
        new = new.astype(DTYPES[pre.info(e.name)[0]].newbyteorder("=")).reshape(e.shape)
        check_finite(new, e.name, "result")
        tensors[e.name] = new
    meta = dict(pre.metadata)
    meta[PROVENANCE_KEY] = canonical_json(provenance)
    return Checkpoint(tensors, meta)


def apply_task_vector(pre: Checkpoint, tau: FlatVector, alpha: float, schema: FlattenSchema) -> Checkpoint:
    """theta_new = theta_pre + alpha * tau."""
    check_fingerprint(tau, schema)
    alpha = float(alpha)
    if not math.isfinite(alpha):
        raise NumericError(f"alpha must be finite, got {alpha}")
    delta = alpha * np.asarray(tau.values, dtype=np.float64)
    prov = {
        "op": "apply_task_vector",
        "alpha": alpha,
        "schema_fingerprint": f"{schema.fingerprint:016x}",
        "task_vector_fingerprint": f"{tau.fingerprint:016x}",
    }
    return add_to_checkpoint(pre, delta, schema, prov)


def stack_rows(vectors: Sequence[FlatVector], start: int, stop: int) -> np.ndarray:
    """Rows ``start:stop`` of the speaker matrix, as an (N, stop - start) block."""
    return np.stack([np.asarray(v.values[start:stop], dtype=np.float64) for v in vectors])
