"""Synthetic checkpoint corpora with a planted two-group factor.

Every fine-tuned checkpoint is ``pre + tau_i`` with

    tau_i = s_i * g * u_g + sum_k z_ik * u_k + eps_i

where ``u_g`` and ``u_k`` are fixed random unit vectors, ``s_i`` is +1 for
group A and -1 for group B, ``z_ik ~ N(0, 1)`` and ``eps_i ~ N(0, noise^2 / M)``
per component. The sign of the dominant coefficient should then reproduce the
group split, which :func:`verify_axis_recovery` checks.

Task vectors live on the ``va.*`` and ``dec.*`` tensors; ``enc.*`` tensors are
frozen and identical across the corpus.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ckptio import Checkpoint, DTYPES, read_checkpoint, write_checkpoint
from .eigenspace import SpeakerBasis
from .errors import DataError, UsageError
from .taskvec import FlattenSchema, ParamFilter, derive_schema

SPEAKER_PATTERNS = ("dec.*", "va.*")
DEFAULT_FROZEN = (("enc.embed.weight", (64, 16)),)
PRE_SCALE = 0.02


def default_layout(m: int) -> list[tuple[str, tuple[int, ...]]]:
    """Split ``m`` parameters over a handful of decoder / variance-adaptor tensors."""
    if m < 10:
        return [("dec.0.weight", (m,))]
    tenth = m // 10
    dec0 = (m - 3 * tenth) // 2
    sizes = [
        ("va.duration.weight", tenth),
        ("va.energy.weight", tenth),
        ("va.pitch.weight", tenth),
        ("dec.0.weight", dec0),
        ("dec.1.weight", m - 3 * tenth - dec0),
    ]
    layout = []
    for name, size in sizes:
        width = next((w for w in (64, 32, 16, 10, 8, 5, 4, 2) if size % w == 0 and size > w), None)
        layout.append((name, (size // width, width) if width else (size,)))
    return layout


@dataclass
class CorpusSpec:
    seed: int = 0
    M: int = 100_000
    N: int = 10
    group_split: tuple[int, int] = (5, 5)
    factor_strength: float = 3.0
    latent_dims: int = 4
    noise_scale: float = 0.1
    tensor_layout: list[tuple[str, tuple[int, ...]]] | None = None
    frozen_layout: list[tuple[str, tuple[int, ...]]] = field(default_factory=lambda: list(DEFAULT_FROZEN))
    dtype: str = "f64"

    def __post_init__(self):
        self.group_split = tuple(int(x) for x in self.group_split)
        if self.tensor_layout is None:
            self.tensor_layout = default_layout(self.M)
        self.tensor_layout = [(str(n), tuple(int(d) for d in s)) for n, s in self.tensor_layout]
        self.frozen_layout = [(str(n), tuple(int(d) for d in s)) for n, s in self.frozen_layout]

    def validate(self) -> None:
        if self.N < 2:
            raise UsageError(f"N must be at least 2, got {self.N}")
        if len(self.group_split) != 2 or sum(self.group_split) != self.N or min(self.group_split) < 0:
            raise UsageError(f"group_split {self.group_split} must be two non-negative counts summing to N={self.N}")
        if not 0 <= self.latent_dims < self.N:
            raise UsageError(f"latent_dims must satisfy 0 <= d < N, got {self.latent_dims}")
        if self.noise_scale < 0 or not math.isfinite(self.factor_strength):
            raise UsageError("noise_scale must be non-negative and factor_strength finite")
        if self.dtype not in DTYPES:
            raise UsageError(f"dtype must be one of {sorted(DTYPES)}")
        total = sum(math.prod(s) for _, s in self.tensor_layout)
        if total != self.M or self.M < 1:
            raise UsageError(f"tensor_layout realizes {total} parameters, M is {self.M}")
        names = [n for n, _ in self.tensor_layout + self.frozen_layout]
        if len(set(names)) != len(names):
            raise UsageError("tensor names in the layouts must be unique")
        filt = ParamFilter(SPEAKER_PATTERNS)
        if not all(filt.matches(n) for n, _ in self.tensor_layout):
            raise UsageError(f"speaker tensors must match {list(SPEAKER_PATTERNS)}")
        if any(filt.matches(n) for n, _ in self.frozen_layout):
            raise UsageError(f"frozen tensors must not match {list(SPEAKER_PATTERNS)}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["group_split"] = list(self.group_split)
        doc["tensor_layout"] = [[n, list(s)] for n, s in self.tensor_layout]
        doc["frozen_layout"] = [[n, list(s)] for n, s in self.frozen_layout]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> CorpusSpec:
        return cls(**doc)


def _unit(rng: np.random.Generator, m: int) -> np.ndarray:
    v = rng.standard_normal(m)
    return v / np.linalg.norm(v)


def planted_direction(planted_seed: int, m: int) -> np.ndarray:
    """The unit group direction ``u_g`` in schema (sorted tensor name) order."""
    return _unit(np.random.Generator(np.random.Philox(planted_seed)), m)


def _child_seeds(seed: int) -> dict[str, int]:
    state = np.random.SeedSequence(seed).generate_state(5, dtype=np.uint64)
    return dict(zip(("pre", "planted", "latent", "z", "noise"), (int(x) for x in state)))


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _scatter(flat: np.ndarray, schema: FlattenSchema) -> dict[str, np.ndarray]:
    return {e.name: flat[e.offset : e.offset + e.size].reshape(e.shape) for e in schema.entries}


def generate_corpus(spec: CorpusSpec, out_dir: str | os.PathLike) -> dict:
    """Write ``pre.evc``, one checkpoint per speaker and ``manifest.json``; return the manifest."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _child_seeds(spec.seed)
    dt = DTYPES[spec.dtype].newbyteorder("=")

    rng = _rng(seeds["pre"])
    pre_tensors = {}
    for name, shape in spec.tensor_layout + spec.frozen_layout:
        pre_tensors[name] = (rng.standard_normal(shape) * PRE_SCALE).astype(dt)
    pre = Checkpoint(pre_tensors, {"role": "pre"})
    schema = derive_schema(pre, ParamFilter(SPEAKER_PATTERNS))
    m = schema.total_dim

    u_g = planted_direction(seeds["planted"], m)
    lat_rng = _rng(seeds["latent"])
    u_lat = np.stack([_unit(lat_rng, m) for _ in range(spec.latent_dims)]) if spec.latent_dims else np.zeros((0, m))
    z = _rng(seeds["z"]).standard_normal((spec.N, spec.latent_dims))
    noise_rng = _rng(seeds["noise"])
    pre_flat = np.concatenate([pre_tensors[e.name].astype(np.float64).ravel() for e in schema.entries])

    write_checkpoint(pre, out / "pre.evc")
    n_a = spec.group_split[0]
    width = max(2, len(str(spec.N - 1)))
    speakers = []
    for i in range(spec.N):
        s = 1.0 if i < n_a else -1.0
        tau = s * spec.factor_strength * u_g + z[i] @ u_lat
        tau = tau + noise_rng.standard_normal(m) * (spec.noise_scale / math.sqrt(m))
        tensors = dict(pre_tensors)
        for name, arr in _scatter(pre_flat + tau, schema).items():
            tensors[name] = arr.astype(dt)
        label = f"spk{i:0{width}d}"
        group = "A" if s > 0 else "B"
        write_checkpoint(Checkpoint(tensors, {"speaker_id": label, "group": group}), out / f"{label}.evc")
        speakers.append({"path": f"{label}.evc", "label": label, "group": group})

    manifest = {
        "pre": "pre.evc",
        "speakers": speakers,
        "spec": spec.to_dict(),
        "planted_seed": seeds["planted"],
        "filter": {"include": list(SPEAKER_PATTERNS), "exclude": []},
        "schema_fingerprint": f"{schema.fingerprint:016x}",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


@dataclass
class Manifest:
    root: Path
    doc: dict

    @classmethod
    def load(cls, path: str | os.PathLike) -> Manifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}") from None
        return cls(path.parent, doc)

    @property
    def pre_path(self) -> Path:
        return self.root / self.doc["pre"]

    @property
    def speaker_paths(self) -> list[Path]:
        return [self.root / s["path"] for s in self.doc["speakers"]]

    @property
    def labels(self) -> list[str]:
        return [s["label"] for s in self.doc["speakers"]]

    @property
    def groups(self) -> np.ndarray:
        return np.array([1.0 if s["group"] == "A" else -1.0 for s in self.doc["speakers"]])

    @property
    def param_filter(self) -> ParamFilter:
        f = self.doc["filter"]
        return ParamFilter(tuple(f["include"]), tuple(f["exclude"]))

    @property
    def fingerprint(self) -> int:
        return int(self.doc["schema_fingerprint"], 16)

    def pre(self) -> Checkpoint:
        return read_checkpoint(self.pre_path)

    def planted(self) -> np.ndarray:
        return planted_direction(self.doc["planted_seed"], self.doc["spec"]["M"])


@dataclass
class AxisRecoveryReport:
    agreement: int
    total: int
    global_sign: int
    cosine: float

    @property
    def fraction(self) -> float:
        return self.agreement / self.total


def verify_axis_recovery(manifest: Manifest, basis: SpeakerBasis) -> AxisRecoveryReport:
    """Compare the dominant axis of ``basis`` with the planted group factor.

    ``agreement`` counts speakers whose sign of the first coefficient matches
    their group, under whichever global sign agrees best. ``cosine`` is taken
    between the de-standardized first basis direction ``std * U[:, 0]`` and the
    planted direction.
    """
    if basis.fingerprint != manifest.fingerprint:
        raise DataError(
            f"basis fingerprint {basis.fingerprint:016x} does not match corpus {manifest.fingerprint:016x}"
        )
    if basis.labels != manifest.labels:
        raise DataError("basis speaker labels do not match the manifest")
    groups = manifest.groups
    first = np.sign(basis.coeffs[0])
    pos = int(np.count_nonzero(first == groups))
    neg = int(np.count_nonzero(first == -groups))
    direction = np.asarray(basis.u[:, 0]) * np.asarray(basis.std)
    planted = manifest.planted()
    cos = float(direction @ planted / (np.linalg.norm(direction) * np.linalg.norm(planted)))
    return AxisRecoveryReport(max(pos, neg), len(groups), 1 if pos >= neg else -1, cos)
