"""Cosine-similarity reports and coefficient scatter tables.

Similarities work on any vectors: speaker parameter vectors computed here or
embeddings supplied from elsewhere as EVV1 files with a null fingerprint.
All CSV output uses shortest round-trip float formatting and ``\\n`` line
endings, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .eigenspace import SpeakerBasis, PairwiseSum, _spans
from .errors import DataError

HIST_BINS = 20
_CHUNK = 1 << 18


def _values(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=np.float64).reshape(-1)


def _label(v, default: str) -> str:
    label = getattr(v, "label", None)
    return str(label) if label is not None else default


def _fmt(x: float) -> str:
    return repr(float(x))


def cosine_similarity(a, b) -> float:
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    ma, mb = np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0)
    if ma == 0 or mb == 0:
        raise DataError("cosine similarity is undefined for a zero vector")
    # scaling keeps the squared norms away from under/overflow
    a, b = a / ma, b / mb
    return float(np.clip(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)), -1.0, 1.0))


@dataclass
class SimilarityRow:
    label: str
    similarities: np.ndarray
    max_similarity: float
    nearest: str


@dataclass
class SimilarityReport:
    base_labels: list[str]
    rows: list[SimilarityRow]
    summary: dict = field(default_factory=dict)

    @property
    def max_column(self) -> np.ndarray:
        return np.array([r.max_similarity for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "max_similarity", "nearest_base"] + [f"sim:{b}" for b in self.base_labels])
        for r in self.rows:
            w.writerow([r.label, _fmt(r.max_similarity), r.nearest] + [_fmt(x) for x in r.similarities])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        edges, counts = self.summary["edges"], self.summary["counts"]
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([_fmt(lo), _fmt(hi), int(c)])
        return buf.getvalue()


def _similarity_matrix(gen: list[np.ndarray], bases: list[np.ndarray]) -> np.ndarray:
    dim = gen[0].shape[0]
    dots, ng, nb = PairwiseSum(), PairwiseSum(), PairwiseSum()
    for s, e in _spans(dim, _CHUNK):
        g = np.stack([v[s:e] for v in gen])
        b = np.stack([v[s:e] for v in bases])
        dots.add(g @ b.T)
        ng.add(np.einsum("ij,ij->i", g, g))
        nb.add(np.einsum("ij,ij->i", b, b))
    sq_g, sq_b = ng.total(), nb.total()
    if not (sq_g > 0).all() or not (sq_b > 0).all():
        raise DataError("cosine similarity is undefined for a zero vector")
    return np.clip(dots.total() / np.sqrt(np.outer(sq_g, sq_b)), -1.0, 1.0)


def max_similarity_report(
    generated: Sequence,
    bases: Sequence,
    base_labels: Sequence[str] | None = None,
    bins: int = HIST_BINS,
) -> SimilarityReport:
    """For every generated vector: its cosine to each base and the maximum of those.

    The summary carries min/max/mean of the max column and a ``bins``-bin
    histogram over its observed range.
    """
    if not generated or not bases:
        raise DataError("similarity report needs at least one generated and one base vector")
    gen = [_values(v) for v in generated]
    base = [_values(v) for v in bases]
    dims = {v.shape[0] for v in gen + base}
    if len(dims) != 1:
        raise DataError(f"inconsistent vector dimensions {sorted(dims)}")
    if base_labels is None:
        base_labels = [_label(v, f"base{i:04d}") for i, v in enumerate(bases)]
    base_labels = [str(x) for x in base_labels]
    if len(base_labels) != len(base):
        raise DataError(f"{len(base_labels)} labels for {len(base)} base vectors")

    sims = _similarity_matrix(gen, base)
    rows = []
    for i, v in enumerate(generated):
        j = int(np.argmax(sims[i]))
        rows.append(SimilarityRow(_label(v, f"gen{i:04d}"), sims[i], float(sims[i, j]), base_labels[j]))

    col = sims.max(axis=1)
    counts, edges = np.histogram(col, bins=bins, range=(float(col.min()), float(col.max())))
    summary = {
        "min": float(col.min()),
        "max": float(col.max()),
        "mean": float(col.mean()),
        "counts": counts,
        "edges": edges,
    }
    return SimilarityReport(base_labels, rows, summary)


def coeff_scatter_export(basis: SpeakerBasis, components: tuple[int, int] = (0, 1)) -> str:
    """CSV of base-speaker coefficients on two axes, plus the sign of the first one."""
    i, j = components
    for k in (i, j):
        if not 0 <= k < basis.rank:
            raise DataError(f"component {k} out of range for rank {basis.rank}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", f"w{i}", f"w{j}", "sign_w0"])
    for n, label in enumerate(basis.labels):
        c = basis.coeffs[:, n]
        w.writerow([label, _fmt(c[i]), _fmt(c[j]), int(np.sign(c[0]))])
    return buf.getvalue()
