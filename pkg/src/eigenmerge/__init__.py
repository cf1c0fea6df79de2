"""Speaker spaces over fine-tuned checkpoints.

Task vectors of N fine-tuned checkpoints are stacked, standardized and
factorized; new checkpoints are synthesized from coefficient vectors drawn to
match the base speakers' statistics, and single axes can be flipped to move
along an attribute direction.
"""

from .ckptio import Checkpoint, SchemaReport, diff_schemas, read_checkpoint, write_checkpoint
from .editor import flip_axis, interpolate_models, synthesize_checkpoint
from .eigenspace import (
    SpeakerBasis,
    SpeakerCoeff,
    accumulate_stats,
    fit_basis,
    load_basis,
    project,
    reconstruct,
    sample_coeff,
    save_basis,
    standardize,
)
from .errors import DataError, EigenmergeError, FormatError, NumericError, UsageError
from .taskvec import (
    FlattenSchema,
    FlatVector,
    ParamFilter,
    apply_task_vector,
    derive_schema,
    extract_task_vector,
    read_flat_vector,
    write_flat_vector,
)

__version__ = "0.1.0"

__all__ = [
    "accumulate_stats",
    "apply_task_vector",
    "Checkpoint",
    "DataError",
    "derive_schema",
    "diff_schemas",
    "EigenmergeError",
    "extract_task_vector",
    "fit_basis",
    "FlattenSchema",
    "FlatVector",
    "flip_axis",
    "FormatError",
    "interpolate_models",
    "load_basis",
    "NumericError",
    "ParamFilter",
    "project",
    "read_checkpoint",
    "read_flat_vector",
    "reconstruct",
    "sample_coeff",
    "save_basis",
    "SchemaReport",
    "SpeakerBasis",
    "SpeakerCoeff",
    "standardize",
    "synthesize_checkpoint",
    "UsageError",
    "write_checkpoint",
    "write_flat_vector",
]
