"""Speaker space: thin SVD of the M x N speaker matrix through its N x N Gram matrix.

Columns of the speaker matrix are task vectors, one per base speaker. Nothing
of size M x M is ever formed; every pass walks the M rows in chunks, so the
working set is O(N^2 + N * chunk) on top of the basis itself.

Passes over the data:

1. per-row mean / population std across speakers (if standardizing),
2. the Gram matrix ``G = A^T A``, giving ``sigma`` and ``V``,
3. ``U = A V diag(sigma)^-1`` for the retained directions.

Step 2 has two forms. ``method="qr"`` (default) accumulates a triangular
factor R with ``R^T R = G`` and takes the SVD of R; small singular values
stay accurate to about ``eps * sigma_1``. ``method="gram"`` sums G itself
and calls ``eigh``; it is cheaper but cannot resolve singular values below
roughly ``sqrt(eps) * sigma_1``, so the default ``rank_tol`` of 1e-10 will
not drop the null direction that centering creates.

Partial sums over chunks are combined in a fixed pairwise tree, so results are
bitwise reproducible for any thread count.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, NumericError, UsageError
from .taskvec import (
    FlatVector,
    FlatVectorWriter,
    canonical_json,
    read_flat_vector,
    stack_rows,
)

DEFAULT_CHUNK_SIZE = 1 << 20
DEFAULT_RANK_TOL = 1e-10
DEFAULT_EPS_STD = 1e-12
FIT_METHODS = ("qr", "gram")

EVM_MAGIC = b"EVM1"
_EVM_HEADER = struct.Struct("<4sQQ")
BASIS_FORMAT = "eigenmerge-basis/1"


def _spans(dim: int, chunk_size: int) -> list[tuple[int, int]]:
    if chunk_size < 1:
        raise UsageError(f"chunk size must be positive, got {chunk_size}")
    return [(s, min(s + chunk_size, dim)) for s in range(0, dim, chunk_size)]


class PairwiseSum:
    """Sums a stream of arrays along a balanced binary tree.

    The association order depends only on the number of terms, so the result
    is reproducible, and rounding error grows like log(n) rather than n.
    ``combine`` replaces ``+`` for other associative merges.
    """

    def __init__(self, combine: Callable[[np.ndarray, np.ndarray], np.ndarray] = np.add):
        self._combine = combine
        self._stack: list[tuple[int, np.ndarray]] = []

    def add(self, x: np.ndarray) -> None:
        level = 0
        while self._stack and self._stack[-1][0] == level:
            _, y = self._stack.pop()
            x = self._combine(y, x)
            level += 1
        self._stack.append((level, x))

    def total(self) -> np.ndarray | None:
        if not self._stack:
            return None
        acc = self._stack[-1][1]
        for _, y in reversed(self._stack[:-1]):
            acc = self._combine(y, acc)
        return acc


def _ordered_map(fn: Callable, items: list, threads: int) -> Iterator:
    """``map(fn, items)`` with at most ``2 * threads`` calls in flight, results in order."""
    if threads <= 1:
        yield from map(fn, items)
        return
    window = 2 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for i in range(0, len(items), window):
            yield from pool.map(fn, items[i : i + window])


def _check_vectors(vectors: Sequence[FlatVector]) -> tuple[int, int, int]:
    n = len(vectors)
    if n < 2:
        raise DataError(f"need at least 2 speaker vectors, got {n}")
    fp, dim = vectors[0].fingerprint, vectors[0].dim
    for i, v in enumerate(vectors):
        if v.fingerprint != fp:
            raise DataError(f"fingerprint mismatch: vector {i} has {v.fingerprint:016x}, vector 0 has {fp:016x}")
        if v.dim != dim:
            raise DataError(f"dimension mismatch: vector {i} has {v.dim}, vector 0 has {dim}")
    if dim == 0:
        raise DataError("speaker vectors are empty")
    return n, dim, fp


def _raw_block(vectors: Sequence[FlatVector], start: int, stop: int) -> np.ndarray:
    block = stack_rows(vectors, start, stop)
    bad = ~np.isfinite(block)
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise NumericError(f"non-finite value in speaker vector {i} at index {start + k}")
    return block


@dataclass
class SpeakerStats:
    """Per-dimension statistics across speakers. ``flagged`` lists floored dims."""

    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray

    def __iter__(self):
        return iter((self.mean, self.std))


def accumulate_stats(
    vectors: Sequence[FlatVector],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    eps_std: float = DEFAULT_EPS_STD,
) -> SpeakerStats:
    """Mean and population std (divide by N) of every dimension over the N speakers.

    Dimensions whose std falls below ``eps_std`` get std 1.0, i.e. they are
    only centered, and are reported in ``flagged``.
    """
    _, dim, _ = _check_vectors(vectors)
    mean = np.empty(dim)
    std = np.empty(dim)
    for s, e in _spans(dim, chunk_size):
        block = _raw_block(vectors, s, e)
        m = block.mean(axis=0)
        mean[s:e] = m
        std[s:e] = np.sqrt(((block - m) ** 2).mean(axis=0))
    low = std < eps_std
    std[low] = 1.0
    return SpeakerStats(mean, std, np.flatnonzero(low))


def standardize(a: FlatVector, mean: np.ndarray, std: np.ndarray) -> FlatVector:
    if not (a.dim == len(mean) == len(std)):
        raise DataError(f"dimension mismatch: vector {a.dim}, mean {len(mean)}, std {len(std)}")
    return FlatVector((np.asarray(a.values, dtype=np.float64) - mean) / std, a.fingerprint, a.label)


@dataclass
class SpeakerCoeff:
    values: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64).reshape(-1)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(eq=False)
class SpeakerBasis:
    """A fitted speaker space in standardized coordinates.

    ``u`` is M x r with orthonormal columns, ``sigma`` the r retained singular
    values (non-increasing) and ``coeffs`` the r x N matrix whose column i is
    base speaker i's coefficient vector, so ``u @ diag(sigma) @ coeffs`` gives
    the standardized speaker matrix.
    """

    u: np.ndarray
    sigma: np.ndarray
    coeffs: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_speakers: int
    fingerprint: int
    labels: list[str]
    standardized: bool = True
    flagged: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    options: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def dim(self) -> int:
        return int(self.u.shape[0])

    @property
    def chunk_size(self) -> int:
        return int(self.options.get("chunk_size", DEFAULT_CHUNK_SIZE))

    @property
    def basis_id(self) -> str:
        h = hashlib.sha256(canonical_json(self._meta()).encode("utf-8"))
        h.update(np.ascontiguousarray(self.coeffs, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def base_coeff(self, i: int) -> SpeakerCoeff:
        return SpeakerCoeff(self.coeffs[:, i], self.labels[i])

    def standardize(self, a: FlatVector) -> FlatVector:
        if a.fingerprint != self.fingerprint:
            raise DataError(
                f"fingerprint mismatch: vector {a.fingerprint:016x} vs basis {self.fingerprint:016x}"
            )
        return standardize(a, self.mean, self.std)

    def _meta(self) -> dict:
        return {
            "format": BASIS_FORMAT,
            "N": self.n_speakers,
            "M": self.dim,
            "r": self.rank,
            "sigma": [float(s) for s in self.sigma],
            "labels": list(self.labels),
            "schema_fingerprint": f"{self.fingerprint:016x}",
            "standardized": bool(self.standardized),
            "flagged": [int(i) for i in self.flagged],
            "options": dict(self.options),
        }


def fit_basis(
    vectors: Sequence[FlatVector],
    labels: Sequence[str] | None = None,
    rank_tol: float = DEFAULT_RANK_TOL,
    standardize: bool = True,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    threads: int = 1,
    eps_std: float = DEFAULT_EPS_STD,
    scratch_dir: str | os.PathLike | None = None,
    method: str = "qr",
) -> SpeakerBasis:
    """Fit the speaker space to N task vectors.

    Keeps the directions with ``sigma_j > sigma_1 * rank_tol``. ``method``
    picks how the Gram matrix is factored (see the module notes). With
    ``scratch_dir`` the M x r basis lives in a memory-mapped file there.
    """
    n, dim, fp = _check_vectors(vectors)
    if not 0 < rank_tol < 1:
        raise UsageError(f"rank_tol must lie in (0, 1), got {rank_tol}")
    if method not in FIT_METHODS:
        raise UsageError(f"method must be one of {FIT_METHODS}, got {method!r}")
    labels = [str(x) for x in labels] if labels is not None else [f"spk{i:04d}" for i in range(n)]
    if len(labels) != n:
        raise DataError(f"{len(labels)} labels for {n} vectors")
    spans = _spans(dim, chunk_size)

    if standardize:
        stats = accumulate_stats(vectors, chunk_size, eps_std)
        mean, std, flagged = stats.mean, stats.std, stats.flagged
    else:
        mean, std, flagged = np.zeros(dim), np.ones(dim), np.empty(0, dtype=np.int64)

    def block(span):
        s, e = span
        b = _raw_block(vectors, s, e)
        if standardize:
            b = (b - mean[s:e]) / std[s:e]
        return b

    if method == "qr":
        sigma_all, V = _factor_qr(block, spans, threads, n)
    else:
        sigma_all, V = _factor_gram(block, spans, threads)
    if not (np.isfinite(sigma_all).all() and sigma_all[0] > 0):
        raise NumericError("speaker matrix is numerically zero; no singular value above tolerance")
    r = int(np.count_nonzero(sigma_all > sigma_all[0] * rank_tol))
    sigma = sigma_all[:r].copy()
    Vk = V[:, :r].copy()

    # Orient each direction so the largest-magnitude coefficient is positive.
    pivot = np.argmax(np.abs(Vk), axis=0)
    Vk *= np.where(Vk[pivot, np.arange(r)] < 0, -1.0, 1.0)

    W = Vk / sigma
    U = _alloc((dim, r), scratch_dir, "U.scratch", order="F")

    def finish_rows(span):
        s, e = span
        U[s:e] = block(span).T @ W

    for _ in _ordered_map(finish_rows, spans, threads):
        pass

    options = {"rank_tol": rank_tol, "chunk_size": chunk_size, "eps_std": eps_std, "method": method}
    return SpeakerBasis(
        u=U,
        sigma=sigma,
        coeffs=np.ascontiguousarray(Vk.T),
        mean=mean,
        std=std,
        n_speakers=n,
        fingerprint=fp,
        labels=labels,
        standardized=standardize,
        flagged=flagged,
        options=options,
    )


def _factor_gram(block, spans, threads):
    """Singular values and right vectors from ``eigh(A^T A)``."""

    def gram(span):
        b = block(span)
        return b @ b.T

    acc = PairwiseSum()
    for g in _ordered_map(gram, spans, threads):
        acc.add(g)
    G = acc.total()
    lam, V = np.linalg.eigh(0.5 * (G + G.T))
    return np.sqrt(np.clip(lam[::-1], 0.0, None)), V[:, ::-1]


def _stack_r(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    return np.linalg.qr(np.vstack((r1, r2)), mode="r")


def _factor_qr(block, spans, threads, n):
    """Singular values and right vectors from the SVD of R, where ``A = QR``.

    R is built chunk by chunk (tall-skinny QR) and merged pairwise, so
    ``R^T R`` is the Gram matrix without ever squaring the condition number.
    """

    def local_r(span):
        return np.linalg.qr(block(span).T, mode="r")

    acc = PairwiseSum(_stack_r)
    for rc in _ordered_map(local_r, spans, threads):
        acc.add(rc)
    R = acc.total()
    if R.shape[0] < n:
        R = np.vstack((R, np.zeros((n - R.shape[0], n))))
    _, s, vt = np.linalg.svd(R)
    return s, vt.T


def _alloc(shape, scratch_dir, name, order="C"):
    if scratch_dir is None:
        return np.empty(shape, order=order)
    return np.lib.format.open_memmap(
        Path(scratch_dir) / name, mode="w+", dtype=np.float64, shape=shape, fortran_order=order == "F"
    )


def _check_coeff(basis: SpeakerBasis, w: SpeakerCoeff) -> None:
    if w.dim != basis.rank:
        raise DataError(f"coefficient has dim {w.dim}, basis rank is {basis.rank}")


def reconstruct(basis: SpeakerBasis, w: SpeakerCoeff) -> FlatVector:
    """U @ (sigma * w): the standardized speaker vector for coefficients ``w``."""
    _check_coeff(basis, w)
    x = basis.sigma * w.values
    out = np.empty(basis.dim)
    for s, e in _spans(basis.dim, basis.chunk_size):
        out[s:e] = basis.u[s:e] @ x
    return FlatVector(out, basis.fingerprint, w.label)


def project(basis: SpeakerBasis, a: FlatVector) -> SpeakerCoeff:
    """Least-squares coefficients ``sigma^-1 U^T a`` of a standardized vector."""
    if a.fingerprint != basis.fingerprint:
        raise DataError(f"fingerprint mismatch: vector {a.fingerprint:016x} vs basis {basis.fingerprint:016x}")
    if a.dim != basis.dim:
        raise DataError(f"vector has dim {a.dim}, basis has {basis.dim}")
    acc = PairwiseSum()
    for s, e in _spans(basis.dim, basis.chunk_size):
        acc.add(basis.u[s:e].T @ np.asarray(a.values[s:e], dtype=np.float64))
    return SpeakerCoeff(acc.total() / basis.sigma, a.label)


def sample_coeff_matrix(seed: int, basis: SpeakerBasis, count: int) -> np.ndarray:
    """``count`` x r i.i.d. Normal(0, 1/N) draws, N being the number of base speakers.

    Generator: numpy ``Philox`` bit generator (counter-based) seeded with
    ``seed``, normals from numpy's ziggurat ``standard_normal``.
    """
    if count < 1:
        raise UsageError(f"count must be at least 1, got {count}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    return rng.standard_normal((count, basis.rank)) / np.sqrt(basis.n_speakers)


def sample_coeff(seed: int, basis: SpeakerBasis, count: int) -> list[SpeakerCoeff]:
    draws = sample_coeff_matrix(seed, basis, count)
    return [SpeakerCoeff(row, f"sample_{i:04d}") for i, row in enumerate(draws)]


# -- persistence -------------------------------------------------------------


def _write_vector(path: Path, values: np.ndarray, fp: int, chunk_size: int) -> None:
    with FlatVectorWriter(path, len(values), fp) as w:
        for s, e in _spans(len(values), chunk_size):
            w.write(values[s:e])


def save_basis(basis: SpeakerBasis, directory: str | os.PathLike) -> Path:
    """Write meta.json, coeffs.evv, mean.evv, std.evv and U.evm into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = basis._meta()
    meta["basis_id"] = basis.basis_id
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    cs = basis.chunk_size
    _write_vector(d / "coeffs.evv", np.ascontiguousarray(basis.coeffs).ravel(), basis.fingerprint, cs)
    _write_vector(d / "mean.evv", basis.mean, basis.fingerprint, cs)
    _write_vector(d / "std.evv", basis.std, basis.fingerprint, cs)
    with open(d / "U.evm", "wb") as fh:
        fh.write(_EVM_HEADER.pack(EVM_MAGIC, basis.dim, basis.rank))
        for j in range(basis.rank):
            for s, e in _spans(basis.dim, cs):
                fh.write(np.ascontiguousarray(basis.u[s:e, j], dtype="<f8").tobytes())
    return d


def load_basis(directory: str | os.PathLike, mmap: bool = True) -> SpeakerBasis:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{d} is not a basis directory (no meta.json)") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / 'meta.json'}: {exc}") from None
    if meta.get("format") != BASIS_FORMAT:
        raise FormatError(f"{d}: unsupported basis format {meta.get('format')!r}")
    fp = int(meta["schema_fingerprint"], 16)
    n, r, dim = meta["N"], meta["r"], meta["M"]

    coeffs = read_flat_vector(d / "coeffs.evv")
    mean = read_flat_vector(d / "mean.evv", mmap=mmap)
    std = read_flat_vector(d / "std.evv", mmap=mmap)
    for name, v, size in (("coeffs", coeffs, r * n), ("mean", mean, dim), ("std", std, dim)):
        if v.fingerprint != fp or v.dim != size:
            raise FormatError(f"{d}/{name}.evv does not match meta.json")

    upath = d / "U.evm"
    with open(upath, "rb") as fh:
        raw = fh.read(_EVM_HEADER.size)
    if len(raw) < _EVM_HEADER.size:
        raise FormatError(f"{upath}: truncated header")
    magic, um, ur = _EVM_HEADER.unpack(raw)
    if magic != EVM_MAGIC:
        raise FormatError(f"{upath}: bad magic {magic!r}")
    if (um, ur) != (dim, r) or upath.stat().st_size != _EVM_HEADER.size + 8 * dim * r:
        raise FormatError(f"{upath}: shape does not match meta.json")
    if mmap:
        u = np.memmap(upath, dtype="<f8", mode="r", offset=_EVM_HEADER.size, shape=(dim, r), order="F")
    else:
        with open(upath, "rb") as fh:
            fh.seek(_EVM_HEADER.size)
            u = np.fromfile(fh, dtype="<f8", count=dim * r).reshape((dim, r), order="F")

    basis = SpeakerBasis(
        u=u,
        sigma=np.array(meta["sigma"], dtype=np.float64),
        coeffs=coeffs.values.reshape(r, n),
        mean=mean.values,
        std=std.values,
        n_speakers=n,
        fingerprint=fp,
        labels=list(meta["labels"]),
        standardized=bool(meta["standardized"]),
        flagged=np.array(meta["flagged"], dtype=np.int64),
        options=dict(meta["options"]),
    )
    if meta.get("basis_id") not in (None, basis.basis_id):
        raise FormatError(f"{d}: basis_id does not match stored contents")
    return basis
