"""Command-line entry point: ``eigenmerge <command> [options]``.

Settings come from built-in defaults, then an optional ``--config`` JSON file,
then flags. A workspace directory holds every stage's output::

    pipeline.json     pre-trained path, filter and schema (written by extract)
    taskvecs/*.evv    one task vector per fine-tuned checkpoint
    basis/            fitted speaker space
    coeffs/*.evv      coefficient vectors (sampled or flipped)
    synth/*.evc       synthesized checkpoints
    reports/*.csv     similarity and scatter tables

Exit codes: 0 ok, 2 usage, 3 data/format error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import coeff_scatter_export, max_similarity_report
from .ckptio import MAGIC as EVC_MAGIC
from .ckptio import read_checkpoint, write_checkpoint
from .editor import flip_axis, interpolate_models, synthesize_checkpoint
from .eigenspace import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_RANK_TOL,
    FIT_METHODS,
    SpeakerCoeff,
    fit_basis,
    load_basis,
    sample_coeff,
    save_basis,
)
from .errors import DataError, EigenmergeError, UsageError
from .synthgen import CorpusSpec, Manifest, generate_corpus
from .taskvec import (
    FlatVector,
    FlattenSchema,
    ParamFilter,
    derive_schema,
    extract_task_vector,
    read_flat_vector,
    write_flat_vector,
)


@dataclass
class PipelineConfig:
    workspace: Path = Path("workspace")
    pre: str | None = None
    finetuned: list[str] = field(default_factory=list)
    manifest: str | None = None
    include: list[str] = field(default_factory=lambda: ["*"])
    exclude: list[str] = field(default_factory=list)
    rank_tol: float = DEFAULT_RANK_TOL
    chunk_size: int = DEFAULT_CHUNK_SIZE
    seed: int = 0
    standardize: bool = True
    method: str = "qr"
    threads: int = 1
    overwrite: bool = False

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> PipelineConfig:
        doc: dict = {}
        if args.config:
            try:
                doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise UsageError(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file {args.config}: {exc}") from None
            unknown = set(doc) - set(cls.__dataclass_fields__)
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key in cls.__dataclass_fields__:
            value = getattr(args, key, None)
            if value is not None:
                doc[key] = value
        if isinstance(doc.get("finetuned"), str):
            doc["finetuned"] = [doc["finetuned"]]
        cfg = cls(**doc)
        cfg.workspace = Path(cfg.workspace)
        if cfg.threads < 1:
            raise UsageError("--threads must be at least 1")
        if not 0 <= cfg.seed < 2**64:
            raise UsageError(f"--seed must be an unsigned 64-bit integer, got {cfg.seed}")
        return cfg

    def finetuned_paths(self) -> list[Path]:
        paths: list[Path] = []
        for item in self.finetuned:
            if glob.has_magic(item):
                paths.extend(Path(p) for p in sorted(glob.glob(item)))
            else:
                paths.append(Path(item))
        return paths


# -- workspace helpers -------------------------------------------------------


def _out_path(path: Path, cfg: PipelineConfig) -> Path:
    if path.exists() and not cfg.overwrite:
        raise UsageError(f"{path} exists; pass --overwrite to replace it")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_pipeline(cfg: PipelineConfig) -> dict:
    path = cfg.workspace / "pipeline.json"
    if not path.exists():
        raise UsageError(f"{cfg.workspace} has no pipeline.json; run 'extract' first")
    doc = json.loads(path.read_text(encoding="utf-8"))
    doc["schema"] = FlattenSchema.from_dict(doc["schema"])
    return doc


def _pre_and_schema(cfg: PipelineConfig):
    if (cfg.workspace / "pipeline.json").exists():
        doc = _load_pipeline(cfg)
        return read_checkpoint(cfg.workspace / doc["pre"], lazy=True), doc["schema"]
    if not cfg.pre:
        raise UsageError("need a workspace with pipeline.json or --pre")
    pre = read_checkpoint(cfg.pre, lazy=True)
    return pre, derive_schema(pre, ParamFilter(tuple(cfg.include), tuple(cfg.exclude)))


def _taskvec_paths(cfg: PipelineConfig, doc: dict) -> list[Path]:
    return [cfg.workspace / "taskvecs" / f"{label}.evv" for label in doc["labels"]]


def _is_checkpoint(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == EVC_MAGIC


def _load_vectors(paths: list[Path], cfg: PipelineConfig) -> list[FlatVector]:
    """EVV1 files are read as-is; EVC1 checkpoints become task vectors against the workspace pre."""
    out = []
    pre_schema = None
    for p in paths:
        if _is_checkpoint(p):
            if pre_schema is None:
                pre_schema = _pre_and_schema(cfg)
            pre, schema = pre_schema
            vec = extract_task_vector(read_checkpoint(p, lazy=True), pre, schema)
            vec.label = p.stem
        else:
            vec = read_flat_vector(p, mmap=True)
        out.append(vec)
    return out


def _read_coeff(path: Path) -> tuple[SpeakerCoeff, int]:
    vec = read_flat_vector(path)
    return SpeakerCoeff(vec.values, path.stem), vec.fingerprint


def _write_coeff(w: SpeakerCoeff, fingerprint: int, path: Path) -> None:
    write_flat_vector(FlatVector(w.values, fingerprint), path)


# -- commands ----------------------------------------------------------------


def cmd_extract(cfg: PipelineConfig, args) -> dict:
    if cfg.manifest:
        manifest = Manifest.load(cfg.manifest)
        pre_path, ft_paths = manifest.pre_path, manifest.speaker_paths
        labels = manifest.labels
        filt = manifest.param_filter
    else:
        if not cfg.pre or not cfg.finetuned:
            raise UsageError("extract needs --pre and --finetuned (or --manifest)")
        pre_path, ft_paths = Path(cfg.pre), cfg.finetuned_paths()
        labels = [p.stem for p in ft_paths]
        filt = ParamFilter(tuple(cfg.include), tuple(cfg.exclude))
    if not ft_paths:
        raise UsageError("no fine-tuned checkpoints matched")
    if len(set(labels)) != len(labels):
        raise UsageError("fine-tuned checkpoint names must be unique")

    pre = read_checkpoint(pre_path, lazy=True)
    schema = derive_schema(pre, filt)
    ws = cfg.workspace
    ws.mkdir(parents=True, exist_ok=True)
    written = []
    for label, path in zip(labels, ft_paths):
        out = _out_path(ws / "taskvecs" / f"{label}.evv", cfg)
        extract_task_vector(read_checkpoint(path, lazy=True), pre, schema, out=out)
        written.append(str(out))
    pipeline = {
        "pre": Path(os.path.relpath(Path(pre_path).resolve(), ws.resolve())).as_posix(),
        "labels": labels,
        "filter": {"include": list(filt.include), "exclude": list(filt.exclude)},
        "schema": schema.to_dict(),
    }
    (ws / "pipeline.json").write_text(json.dumps(pipeline, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return {"task_vectors": written, "dim": schema.total_dim, "fingerprint": f"{schema.fingerprint:016x}"}


def cmd_fit(cfg: PipelineConfig, args) -> dict:
    doc = _load_pipeline(cfg)
    vectors = [read_flat_vector(p, mmap=True) for p in _taskvec_paths(cfg, doc)]
    basis = fit_basis(
        vectors,
        doc["labels"],
        rank_tol=cfg.rank_tol,
        standardize=cfg.standardize,
        chunk_size=cfg.chunk_size,
        threads=cfg.threads,
        method=cfg.method,
    )
    target = cfg.workspace / "basis"
    if target.exists():
        if not cfg.overwrite:
            raise UsageError(f"{target} exists; pass --overwrite to replace it")
        shutil.rmtree(target)
    save_basis(basis, target)
    return {"basis": str(target), "rank": basis.rank, "sigma": [float(s) for s in basis.sigma]}


def cmd_sample(cfg: PipelineConfig, args) -> dict:
    basis = load_basis(cfg.workspace / "basis")
    coeffs = sample_coeff(cfg.seed, basis, args.count)
    written = []
    index = {"seed": cfg.seed, "count": args.count, "basis_id": basis.basis_id, "samples": []}
    for w in coeffs:
        path = _out_path(cfg.workspace / "coeffs" / f"{w.label}.evv", cfg)
        _write_coeff(w, basis.fingerprint, path)
        written.append(str(path))
        index["samples"].append(w.label)
    (cfg.workspace / "coeffs" / "samples.json").write_text(
        json.dumps(index, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return {"coefficients": written}


def cmd_synth(cfg: PipelineConfig, args) -> dict:
    basis = load_basis(cfg.workspace / "basis")
    pre, schema = _pre_and_schema(cfg)
    jobs: list[tuple[SpeakerCoeff, int | None]] = []
    if args.count:
        jobs += [(w, cfg.seed) for w in sample_coeff(cfg.seed, basis, args.count)]
    for label in args.base or []:
        if label not in basis.labels:
            raise DataError(f"no base speaker labelled {label!r}")
        jobs.append((basis.base_coeff(basis.labels.index(label)), None))
    coeff_files = [Path(p) for p in args.coeff or []]
    if not jobs and not coeff_files:
        coeff_files = sorted((cfg.workspace / "coeffs").glob("*.evv"))
        if not coeff_files:
            raise UsageError("nothing to synthesize: give --coeff, --base or --count, or run 'sample'")
    seeds = {}
    index = cfg.workspace / "coeffs" / "samples.json"
    if index.exists():
        idx = json.loads(index.read_text(encoding="utf-8"))
        if idx.get("basis_id") == basis.basis_id:
            seeds = {label: idx["seed"] for label in idx["samples"]}
    for path in coeff_files:
        w, fp = _read_coeff(path)
        if fp != basis.fingerprint:
            raise DataError(f"{path}: fingerprint {fp:016x} does not match basis {basis.fingerprint:016x}")
        jobs.append((w, seeds.get(w.label)))

    out_dir = Path(args.out) if args.out else cfg.workspace / "synth"
    written = []
    for w, seed in jobs:
        path = _out_path(out_dir / f"{w.label}.evc", cfg)
        write_checkpoint(synthesize_checkpoint(basis, w, pre, schema, seed=seed), path)
        written.append(str(path))
    return {"checkpoints": written}


def cmd_interp(cfg: PipelineConfig, args) -> dict:
    pre, schema = _pre_and_schema(cfg)
    a = read_checkpoint(args.model_a, lazy=True)
    b = read_checkpoint(args.model_b, lazy=True)
    out = _out_path(Path(args.out), cfg)
    write_checkpoint(interpolate_models(a, b, pre, args.alpha, schema), out)
    return {"checkpoint": str(out)}


def cmd_flip(cfg: PipelineConfig, args) -> dict:
    src = Path(args.coeff)
    w, fp = _read_coeff(src)
    flipped = flip_axis(w, args.axis)
    out = Path(args.out) if args.out else cfg.workspace / "coeffs" / f"{src.stem}_flip{args.axis}.evv"
    _write_coeff(flipped, fp, _out_path(out, cfg))
    return {"coefficient": str(out)}


def cmd_report(cfg: PipelineConfig, args) -> dict:
    reports = cfg.workspace / "reports"
    if args.kind == "scatter":
        basis = load_basis(cfg.workspace / "basis")
        i, j = args.components
        out = _out_path(Path(args.out) if args.out else reports / "scatter.csv", cfg)
        out.write_text(coeff_scatter_export(basis, (i, j)), encoding="utf-8")
        return {"report": str(out)}

    if args.generated:
        gen_paths = [Path(p) for p in args.generated]
    else:
        gen_paths = sorted((cfg.workspace / "synth").glob("*.evc"))
    if args.bases:
        base_paths = [Path(p) for p in args.bases]
    else:
        base_paths = _taskvec_paths(cfg, _load_pipeline(cfg))
    if not gen_paths or not base_paths:
        raise UsageError("similarity report needs generated and base vectors")
    report = max_similarity_report(_load_vectors(gen_paths, cfg), _load_vectors(base_paths, cfg))
    out = _out_path(Path(args.out) if args.out else reports / "similarity.csv", cfg)
    out.write_text(report.to_csv(), encoding="utf-8")
    hist = _out_path(out.with_suffix(".hist.csv"), cfg)
    hist.write_text(report.histogram_csv(), encoding="utf-8")
    s = report.summary
    return {"report": str(out), "histogram": str(hist), "min": s["min"], "max": s["max"], "mean": s["mean"]}


def cmd_synthgen(cfg: PipelineConfig, args) -> dict:
    spec = CorpusSpec(
        seed=cfg.seed,
        M=args.M,
        N=args.N,
        group_split=tuple(args.split) if args.split else (args.N // 2, args.N - args.N // 2),
        factor_strength=args.factor_strength,
        latent_dims=args.latent_dims,
        noise_scale=args.noise_scale,
        dtype=args.dtype,
    )
    out = Path(args.out) if args.out else cfg.workspace / "corpus"
    if (out / "manifest.json").exists() and not cfg.overwrite:
        raise UsageError(f"{out} already holds a corpus; pass --overwrite to replace it")
    manifest = generate_corpus(spec, out)
    return {"manifest": str(out / "manifest.json"), "speakers": len(manifest["speakers"])}


COMMANDS = {
    "extract": cmd_extract,
    "fit": cmd_fit,
    "sample": cmd_sample,
    "synth": cmd_synth,
    "interp": cmd_interp,
    "flip": cmd_flip,
    "report": cmd_report,
    "synthgen": cmd_synthgen,
}


class _Parser(argparse.ArgumentParser):
    """Reports bad arguments as UsageError so --json applies to them too."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with pipeline settings")
    common.add_argument("--workspace", help="workspace directory")
    common.add_argument("--seed", type=int, help="RNG seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="worker threads for fitting")
    common.add_argument("--rank-tol", dest="rank_tol", type=float, help="relative singular value cutoff")
    common.add_argument("--chunk-size", dest="chunk_size", type=int, help="scalars per streaming block")
    common.add_argument("--overwrite", action="store_true", default=None, help="replace existing outputs")
    common.add_argument("--json", action="store_true", help="machine-readable output and errors")

    parser = _Parser(prog="eigenmerge", description="Build speaker spaces from fine-tuned checkpoints and synthesize new ones.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="task vectors from fine-tuned checkpoints")
    p.add_argument("--pre", help="pre-trained checkpoint")
    p.add_argument("--finetuned", nargs="+", help="fine-tuned checkpoints (paths or globs)")
    p.add_argument("--manifest", help="synthgen manifest supplying pre, speakers and filter")
    p.add_argument("--include", action="append", help="glob over tensor names (repeatable)")
    p.add_argument("--exclude", action="append", help="glob over tensor names (repeatable)")

    p = sub.add_parser("fit", parents=[common], help="fit the speaker space")
    p.add_argument("--no-standardize", dest="standardize", action="store_const", const=False, default=None)
    p.add_argument("--method", choices=FIT_METHODS, help="Gram factorization (default qr)")

    p = sub.add_parser("sample", parents=[common], help="draw coefficient vectors")
    p.add_argument("--count", type=int, required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize checkpoints from coefficients")
    p.add_argument("--coeff", nargs="+", help="coefficient EVV1 files")
    p.add_argument("--base", nargs="+", help="labels of base speakers to re-synthesize")
    p.add_argument("--count", type=int, help="sample this many coefficients with --seed and synthesize them")
    p.add_argument("--out", help="output directory (default WORKSPACE/synth)")

    p = sub.add_parser("interp", parents=[common], help="interpolate two fine-tuned models")
    p.add_argument("--pre", help="pre-trained checkpoint, when no workspace pipeline exists")
    p.add_argument("--include", action="append")
    p.add_argument("--exclude", action="append")
    p.add_argument("--model-a", dest="model_a", required=True)
    p.add_argument("--model-b", dest="model_b", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("flip", parents=[common], help="negate one coefficient component")
    p.add_argument("--coeff", required=True)
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("report", parents=[common], help="similarity or scatter CSV")
    p.add_argument("kind", choices=["similarity", "scatter"])
    p.add_argument("--generated", nargs="+", help="EVC1 checkpoints or EVV1 vectors")
    p.add_argument("--bases", nargs="+", help="EVC1 checkpoints or EVV1 vectors")
    p.add_argument("--components", nargs=2, type=int, default=[0, 1])
    p.add_argument("--out")

    p = sub.add_parser("synthgen", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", help="corpus directory (default WORKSPACE/corpus)")
    p.add_argument("--M", type=int, default=100_000)
    p.add_argument("--N", type=int, default=10)
    p.add_argument("--split", nargs=2, type=int)
    p.add_argument("--factor-strength", dest="factor_strength", type=float, default=3.0)
    p.add_argument("--latent-dims", dest="latent_dims", type=int, default=4)
    p.add_argument("--noise-scale", dest="noise_scale", type=float, default=0.1)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    return parser


def _fail(exc: Exception, code: int, as_json: bool) -> int:
    if as_json:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
    else:
        print(f"eigenmerge: error: {exc}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, exc.exit_code, "--json" in argv)
    try:
        cfg = PipelineConfig.from_args(args)
        result = COMMANDS[args.command](cfg, args)
    except EigenmergeError as exc:
        return _fail(exc, exc.exit_code, args.json)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(exc, DataError.exit_code, args.json)
    if args.json:
        print(json.dumps(result, sort_keys=True, default=_jsonable))
    else:
        for key, value in result.items():
            if isinstance(value, list) and len(value) > 3:
                value = f"{len(value)} items"
            print(f"{key}: {value}")
    return 0


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    return str(x)


if __name__ == "__main__":
    sys.exit(main())
