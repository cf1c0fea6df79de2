import json
import shutil
import struct
import subprocess
import sys

import numpy as np
import pytest

from eigenmerge.ckptio import Checkpoint, checkpoint_bytes, read_checkpoint, write_checkpoint
from eigenmerge.cli import main
from eigenmerge.eigenspace import load_basis
from eigenmerge.synthgen import CorpusSpec, generate_corpus
from eigenmerge.taskvec import read_flat_vector


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(CorpusSpec(seed=7, M=3000), root)
    return root


@pytest.fixture
def ws(tmp_path, corpus):
    ws = tmp_path / "ws"
    assert main(["extract", "--manifest", str(corpus), "--workspace", str(ws)]) == 0
    return ws


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_extract_writes_task_vectors(ws, corpus):
    names = sorted(p.name for p in (ws / "taskvecs").iterdir())
    assert names == [f"spk{i:02d}.evv" for i in range(10)]
    fps = {read_flat_vector(ws / "taskvecs" / n).fingerprint for n in names}
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert fps == {int(manifest["schema_fingerprint"], 16)}
    pipeline = json.loads((ws / "pipeline.json").read_text())
    assert pipeline["labels"] == [f"spk{i:02d}" for i in range(10)]
    assert (ws / pipeline["pre"]).resolve() == (corpus / "pre.evc").resolve()


def test_extract_with_explicit_paths_matches_manifest(tmp_path, corpus, ws):
    other = tmp_path / "other"
    code = main([
        "extract", "--workspace", str(other), "--pre", str(corpus / "pre.evc"),
        "--finetuned", str(corpus / "spk*.evc"), "--include", "dec.*", "--include", "va.*",
    ])
    assert code == 0
    for n in ("spk00.evv", "spk09.evv"):
        assert (other / "taskvecs" / n).read_bytes() == (ws / "taskvecs" / n).read_bytes()


def test_full_pipeline(ws, capsys):
    code, out, _ = run(capsys, "fit", "--workspace", str(ws), "--json")
    assert code == 0 and json.loads(out)["rank"] == 9
    assert run(capsys, "sample", "--workspace", str(ws), "--count", "5", "--seed", "42")[0] == 0
    index = json.loads((ws / "coeffs" / "samples.json").read_text())
    assert index["seed"] == 42 and index["samples"] == [f"sample_{i:04d}" for i in range(5)]
    assert run(capsys, "flip", "--workspace", str(ws), "--coeff", str(ws / "coeffs" / "sample_0000.evv"))[0] == 0
    flipped = read_flat_vector(ws / "coeffs" / "sample_0000_flip0.evv").values
    orig = read_flat_vector(ws / "coeffs" / "sample_0000.evv").values
    np.testing.assert_array_equal(flipped, orig * np.r_[-1.0, np.ones(len(orig) - 1)])

    assert run(capsys, "synth", "--workspace", str(ws))[0] == 0
    synth = sorted(p.name for p in (ws / "synth").iterdir())
    assert len(synth) == 6 and "sample_0000_flip0.evc" in synth
    prov = json.loads(read_checkpoint(ws / "synth" / "sample_0001.evc").metadata["eigenmerge.provenance"])
    assert prov["seed"] == 42 and prov["basis_id"] == load_basis(ws / "basis").basis_id

    code, out, _ = run(capsys, "report", "similarity", "--workspace", str(ws), "--json")
    assert code == 0 and json.loads(out)["max"] < 1.0
    lines = (ws / "reports" / "similarity.csv").read_text().splitlines()
    assert len(lines) == 7 and lines[0].startswith("label,max_similarity,nearest_base,sim:spk00")
    assert (ws / "reports" / "similarity.hist.csv").exists()
    assert run(capsys, "report", "scatter", "--workspace", str(ws))[0] == 0
    assert len((ws / "reports" / "scatter.csv").read_text().splitlines()) == 11


def test_synth_base_reproduces_finetuned(ws, corpus, capsys):
    run(capsys, "fit", "--workspace", str(ws))
    assert run(capsys, "synth", "--workspace", str(ws), "--base", "spk03")[0] == 0
    got = read_checkpoint(ws / "synth" / "spk03.evc")
    want = read_checkpoint(corpus / "spk03.evc")
    for name, arr in want.tensors.items():
        np.testing.assert_allclose(got.tensors[name], arr, rtol=0, atol=1e-10)


def test_interp_endpoint_is_byte_identical(ws, corpus, tmp_path):
    out = tmp_path / "mix.evc"
    a, b = corpus / "spk01.evc", corpus / "spk08.evc"
    assert main(["interp", "--workspace", str(ws), "--model-a", str(a), "--model-b", str(b),
                 "--alpha", "0", "--out", str(out)]) == 0
    got = read_checkpoint(out)
    pre, model_a = read_checkpoint(corpus / "pre.evc"), read_checkpoint(a)
    tensors = {n: model_a.tensors[n] if n.startswith(("dec.", "va.")) else pre.tensors[n] for n in pre.tensors}
    expected = Checkpoint(tensors, got.metadata)
    assert out.read_bytes() == checkpoint_bytes(expected)
    assert json.loads(got.metadata["eigenmerge.provenance"])["alpha"] == 0.0


def test_interp_without_workspace(tmp_path):
    pre = Checkpoint({"w": np.zeros(2)})
    write_checkpoint(pre, tmp_path / "pre.evc")
    write_checkpoint(Checkpoint({"w": np.array([1.0, 0.0])}), tmp_path / "a.evc")
    write_checkpoint(Checkpoint({"w": np.array([0.0, 1.0])}), tmp_path / "b.evc")
    code = main(["interp", "--workspace", str(tmp_path / "none"), "--pre", str(tmp_path / "pre.evc"),
                 "--model-a", str(tmp_path / "a.evc"), "--model-b", str(tmp_path / "b.evc"),
                 "--alpha", "0.5", "--out", str(tmp_path / "m.evc")])
    assert code == 0
    np.testing.assert_array_equal(read_checkpoint(tmp_path / "m.evc").tensors["w"], [0.5, 0.5])


def test_overwrite_protection(ws, corpus, capsys):
    code, _, err = run(capsys, "extract", "--manifest", str(corpus), "--workspace", str(ws))
    assert code == 2 and "spk00.evv exists" in err
    assert run(capsys, "extract", "--manifest", str(corpus), "--workspace", str(ws), "--overwrite")[0] == 0
    run(capsys, "fit", "--workspace", str(ws))
    code, _, err = run(capsys, "fit", "--workspace", str(ws))
    assert code == 2 and "--overwrite" in err
    assert run(capsys, "fit", "--workspace", str(ws), "--overwrite")[0] == 0


def test_usage_errors_exit_2(ws, tmp_path, capsys):
    code, _, err = run(capsys, "fit", "--workspace", str(tmp_path / "empty"), "--json")
    assert code == 2
    doc = json.loads(err)
    assert doc["exit_code"] == 2 and doc["error"] == "UsageError" and "pipeline.json" in doc["message"]
    assert run(capsys, "fit", "--workspace", str(ws), "--rank-tol", "2")[0] == 2
    assert run(capsys, "sample", "--workspace", str(ws), "--count", "1")[0] == 3  # no basis yet
    code, _, err = run(capsys, "fit", "--method", "lanczos", "--json")
    assert code == 2 and "invalid choice" in json.loads(err)["message"]
    assert run(capsys, "sample", "--workspace", str(ws), "--count", "1", "--seed", "-1")[0] == 2
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and err.startswith("eigenmerge: error:")


def test_config_file_and_flag_precedence(ws, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"workspace": str(ws), "rank_tol": 0.1, "chunk_size": 512}))
    code, out, _ = run(capsys, "fit", "--config", str(cfg), "--json")
    assert code == 0
    small = json.loads(out)["rank"]
    code, out, _ = run(capsys, "fit", "--config", str(cfg), "--rank-tol", "1e-10", "--overwrite", "--json")
    assert json.loads(out)["rank"] == 9 > small
    assert load_basis(ws / "basis").options["chunk_size"] == 512
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "fit", "--config", str(cfg))[0] == 2
    assert run(capsys, "fit", "--config", str(tmp_path / "missing.json"))[0] == 2


def _evc(header: dict, data: bytes, magic=b"EVC1") -> bytes:
    h = json.dumps(header).encode()
    return magic + struct.pack("<Q", len(h)) + h + data


@pytest.mark.parametrize(
    "blob",
    [
        _evc({"metadata": {}, "tensors": {"w": {"dtype": "f64", "shape": [4], "offset": 0, "nbytes": 32}}},
             b"\0" * 8),
        _evc({"metadata": {}, "tensors": {
            "w": {"dtype": "f64", "shape": [2], "offset": 0, "nbytes": 16},
            "v": {"dtype": "f64", "shape": [2], "offset": 8, "nbytes": 16},
        }}, b"\0" * 24),
        _evc({"metadata": {}, "tensors": {}}, b"", magic=b"NOPE"),
        b"EVC1\x03",
    ],
    ids=["truncated", "overlapping", "bad-magic", "short"],
)
def test_malformed_checkpoint_exits_3(tmp_path, blob, capsys):
    bad = tmp_path / "bad.evc"
    bad.write_bytes(blob)
    code, _, err = run(capsys, "extract", "--workspace", str(tmp_path / "ws"), "--pre", str(bad),
                       "--finetuned", str(bad), "--json")
    assert code == 3 and json.loads(err)["exit_code"] == 3


def test_missing_file_exits_3(tmp_path, capsys):
    code, _, err = run(capsys, "extract", "--workspace", str(tmp_path), "--pre", str(tmp_path / "nope.evc"),
                       "--finetuned", str(tmp_path / "x.evc"))
    assert code == 3 and err.startswith("eigenmerge: error:")


def test_nonfinite_result_exits_4(tmp_path, capsys):
    f32 = np.float32
    write_checkpoint(Checkpoint({"w": np.zeros(1, dtype=f32)}), tmp_path / "pre.evc")
    write_checkpoint(Checkpoint({"w": np.full(1, 3e38, dtype=f32)}), tmp_path / "a.evc")
    write_checkpoint(Checkpoint({"w": np.full(1, -3e38, dtype=f32)}), tmp_path / "b.evc")
    with np.errstate(over="ignore"):
        code, _, err = run(capsys, "interp", "--workspace", str(tmp_path / "none"), "--pre",
                           str(tmp_path / "pre.evc"), "--model-a", str(tmp_path / "a.evc"),
                           "--model-b", str(tmp_path / "b.evc"), "--alpha", "-1", "--out",
                           str(tmp_path / "o.evc"), "--json")
    assert code == 4 and json.loads(err)["error"] == "NumericError"
    assert not (tmp_path / "o.evc").exists()


def test_synthgen_command(tmp_path, capsys):
    code, out, _ = run(capsys, "synthgen", "--workspace", str(tmp_path), "--M", "500", "--seed", "3", "--json")
    assert code == 0 and json.loads(out)["speakers"] == 10
    assert run(capsys, "synthgen", "--workspace", str(tmp_path), "--M", "500")[0] == 2
    assert run(capsys, "synthgen", "--workspace", str(tmp_path), "--M", "500", "--N", "1",
               "--overwrite")[0] == 2


@pytest.mark.skipif(shutil.which("eigenmerge") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["eigenmerge", "fit", "--workspace", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2 and "eigenmerge: error:" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "eigenmerge.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("eigenmerge ")
