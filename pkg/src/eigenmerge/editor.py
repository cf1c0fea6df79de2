"""Turning coefficients into checkpoints, two-model interpolation and axis flips."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ckptio import DTYPES, Checkpoint
from .eigenspace import SpeakerBasis, SpeakerCoeff, _spans, reconstruct
from .errors import DataError, NumericError
from .taskvec import (
    PROVENANCE_KEY,
    FlattenSchema,
    FlatVector,
    add_to_checkpoint,
    canonical_json,
    check_finite,
    require_tensor,
)

# A draw from N(0, I/N) has each component within 4 standard deviations with
# overwhelming probability; anything outside is marked as extrapolated.
TYPICAL_SIGMAS = 4.0


@dataclass
class SynthesisRecipe:
    """What a synthesized checkpoint was built from; stored as its provenance."""

    basis_id: str
    coeff: SpeakerCoeff
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        doc = dict(self.provenance)
        doc.update(
            op="synthesize",
            basis_id=self.basis_id,
            coeff=[float(x) for x in self.coeff.values],
            label=self.coeff.label,
            seed=self.seed,
        )
        return doc


def read_provenance(ckpt: Checkpoint) -> dict | None:
    raw = ckpt.metadata.get(PROVENANCE_KEY)
    return json.loads(raw) if raw is not None else None


def is_extrapolated(basis: SpeakerBasis, w: SpeakerCoeff) -> bool:
    return bool(np.any(np.abs(w.values) * math.sqrt(basis.n_speakers) > TYPICAL_SIGMAS))


def destandardize(basis: SpeakerBasis, a_std: FlatVector) -> FlatVector:
    """Map a standardized speaker vector back to task-vector coordinates."""
    if a_std.dim != basis.dim:
        raise DataError(f"vector has dim {a_std.dim}, basis has {basis.dim}")
    out = np.empty(basis.dim)
    for s, e in _spans(basis.dim, basis.chunk_size):
        out[s:e] = np.asarray(a_std.values[s:e]) * basis.std[s:e] + basis.mean[s:e]
    return FlatVector(out, basis.fingerprint, a_std.label)


def speaker_vector(basis: SpeakerBasis, w: SpeakerCoeff) -> FlatVector:
    """Task vector of the speaker at ``w``: de-standardized ``U diag(sigma) w``."""
    return destandardize(basis, reconstruct(basis, w))


def synthesize_checkpoint(
    basis: SpeakerBasis,
    w: SpeakerCoeff,
    pre: Checkpoint,
    schema: FlattenSchema,
    seed: int | None = None,
) -> Checkpoint:
    """Build the checkpoint ``pre + speaker_vector(w)``.

    Tensors outside the schema are copied from ``pre``. Note that ``w = 0``
    gives the centroid of the base speakers, not ``pre`` itself, whenever the
    basis was fitted on standardized vectors.
    """
    if schema.fingerprint != basis.fingerprint:
        raise DataError(
            f"fingerprint mismatch: schema {schema.fingerprint:016x} vs basis {basis.fingerprint:016x}"
        )
    a = speaker_vector(basis, w)
    recipe = SynthesisRecipe(
        basis.basis_id,
        w,
        seed,
        {
            "schema_fingerprint": f"{schema.fingerprint:016x}",
            "extrapolated": is_extrapolated(basis, w),
        },
    )
    return add_to_checkpoint(pre, a.values, schema, recipe.as_dict())


def interpolate_models(
    a: Checkpoint,
    b: Checkpoint,
    pre: Checkpoint,
    alpha: float,
    schema: FlattenSchema,
) -> Checkpoint:
    """theta = (1 - alpha) * theta_A + alpha * theta_B on the schema subset.

    This equals ``pre + (1 - alpha) tau_A + alpha tau_B``; the direct form is
    used because it reproduces the endpoints exactly. ``alpha`` outside [0, 1]
    extrapolates and is flagged in the provenance.
    """
    alpha = float(alpha)
    if not math.isfinite(alpha):
        raise NumericError(f"alpha must be finite, got {alpha}")
    tensors = {name: pre.tensors[name] for name in pre.tensors}
    for e in schema.entries:
        base = require_tensor(pre, e, "pre-trained")
        ta = require_tensor(a, e, "model A").astype(np.float64)
        tb = require_tensor(b, e, "model B").astype(np.float64)
        new = ((1.0 - alpha) * ta + alpha * tb).astype(DTYPES[pre.info(e.name)[0]].newbyteorder("="))
        check_finite(new, e.name, "result")
        tensors[e.name] = new.reshape(base.shape)
    meta = dict(pre.metadata)
    meta[PROVENANCE_KEY] = canonical_json(
        {
            "op": "interpolate",
            "alpha": alpha,
            "extrapolated": not 0.0 <= alpha <= 1.0,
            "schema_fingerprint": f"{schema.fingerprint:016x}",
        }
    )
    return Checkpoint(tensors, meta)


def flip_axis(w: SpeakerCoeff, k: int) -> SpeakerCoeff:
    """Copy of ``w`` with component ``k`` negated."""
    if not 0 <= k < w.dim:
        raise DataError(f"axis {k} out of range for a {w.dim}-dim coefficient")
    values = w.values.copy()
    values[k] = -values[k]
    return SpeakerCoeff(values, w.label)
