import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eigenmerge.ckptio import Checkpoint
from eigenmerge.editor import (
    destandardize,
    flip_axis,
    interpolate_models,
    is_extrapolated,
    read_provenance,
    speaker_vector,
    synthesize_checkpoint,
)
from eigenmerge.eigenspace import SpeakerCoeff, fit_basis, project, reconstruct
from eigenmerge.errors import DataError, NumericError
from eigenmerge.taskvec import (
    FlatVector,
    ParamFilter,
    apply_task_vector,
    derive_schema,
    extract_task_vector,
)


@pytest.fixture(scope="module")
def basis(small_corpus):
    return fit_basis(small_corpus.vectors, small_corpus.labels, chunk_size=1000)


def test_base_speaker_roundtrip(small_corpus, basis):
    c = small_corpus
    for i in (0, 4, 9):
        theta = synthesize_checkpoint(basis, basis.base_coeff(i), c.pre, c.schema)
        for name in c.schema.names:
            got, want = theta.tensors[name], c.finetuned[i].tensors[name]
            assert np.abs(got - want).max() / np.abs(want).max() < 1e-5
        tau = extract_task_vector(theta, c.pre, c.schema).values
        assert np.linalg.norm(tau - c.vectors[i].values) / np.linalg.norm(c.vectors[i].values) < 1e-6


def test_zero_coeff_gives_centroid(small_corpus, basis):
    c = small_corpus
    theta = synthesize_checkpoint(basis, SpeakerCoeff(np.zeros(basis.rank)), c.pre, c.schema)
    tau = extract_task_vector(theta, c.pre, c.schema).values
    centroid = np.mean([v.values for v in c.vectors], axis=0)
    np.testing.assert_allclose(tau, centroid, atol=1e-14)


def test_synthesis_provenance_and_passthrough(small_corpus, basis):
    c = small_corpus
    w = SpeakerCoeff(np.full(basis.rank, 0.1), "sample_0003")
    theta = synthesize_checkpoint(basis, w, c.pre, c.schema, seed=42)
    prov = read_provenance(theta)
    assert prov["op"] == "synthesize" and prov["seed"] == 42 and prov["label"] == "sample_0003"
    assert prov["basis_id"] == basis.basis_id and prov["extrapolated"] is False
    assert theta.tensors["enc.embed.weight"] is c.pre.tensors["enc.embed.weight"]
    assert read_provenance(c.pre) is None


def test_synthesis_rejects_foreign_schema(small_corpus, basis):
    c = small_corpus
    other = derive_schema(c.pre, ParamFilter(("dec.*",)))
    with pytest.raises(DataError, match="fingerprint"):
        synthesize_checkpoint(basis, basis.base_coeff(0), c.pre, other)


def test_extrapolation_flag(basis):
    typical = SpeakerCoeff(np.full(basis.rank, 1.0 / np.sqrt(basis.n_speakers)))
    assert not is_extrapolated(basis, typical)
    far = SpeakerCoeff(np.zeros(basis.rank))
    far.values[2] = 5.0 / np.sqrt(basis.n_speakers)
    assert is_extrapolated(basis, far)


def test_destandardize_inverts_standardize(small_corpus, basis):
    v = small_corpus.vectors[2]
    back = destandardize(basis, basis.standardize(v))
    np.testing.assert_allclose(back.values, v.values, rtol=0, atol=1e-15)
    with pytest.raises(DataError):
        destandardize(basis, FlatVector(np.zeros(3)))


def test_flip_examples():
    assert flip_axis(SpeakerCoeff([0.5, -0.2]), 0).values.tolist() == [-0.5, -0.2]
    assert flip_axis(SpeakerCoeff([0.0, 1.0]), 0).values.tolist() == [0.0, 1.0]
    with pytest.raises(DataError):
        flip_axis(SpeakerCoeff([1.0]), 1)
    w = SpeakerCoeff([1.0, 2.0])
    flip_axis(w, 0)
    assert w.values.tolist() == [1.0, 2.0]


@settings(max_examples=200)
@given(
    st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20),
    st.data(),
)
def test_flip_is_an_involution(values, data):
    w = SpeakerCoeff(values)
    k = data.draw(st.integers(0, w.dim - 1))
    once = flip_axis(w, k)
    assert flip_axis(once, k).values.tobytes() == w.values.tobytes()
    assert np.linalg.norm(once.values) == np.linalg.norm(w.values)
    others = np.arange(w.dim) != k
    assert once.values[others].tobytes() == w.values[others].tobytes()


def test_flip_first_axis_reverses_group_readout(small_corpus, basis):
    """The planted group factor read off a synthesized speaker changes sign with w[0]."""
    c = small_corpus
    u_g = c.manifest.planted()
    groups = c.manifest.groups
    centroid = np.mean([v.values for v in c.vectors], axis=0)

    def readout(w):
        tau = speaker_vector(basis, w).values
        return float((tau - centroid) @ u_g)

    raw = np.array([readout(basis.base_coeff(i)) for i in range(basis.n_speakers)])
    np.testing.assert_array_equal(np.sign(raw), groups)
    flipped = np.array([readout(flip_axis(basis.base_coeff(i), 0)) for i in range(basis.n_speakers)])
    np.testing.assert_array_equal(np.sign(flipped), -groups)


def test_interpolation_endpoints_and_midpoint():
    pre = Checkpoint({"w": np.zeros(2), "frozen": np.array([7.0])}, {"role": "pre"})
    a = Checkpoint({"w": np.array([1.0, 0.0]), "frozen": np.array([7.0])})
    b = Checkpoint({"w": np.array([0.0, 1.0]), "frozen": np.array([7.0])})
    s = derive_schema(pre, ParamFilter(("w",)))
    np.testing.assert_array_equal(interpolate_models(a, b, pre, 0.5, s).tensors["w"], [0.5, 0.5])
    assert interpolate_models(a, b, pre, 0.0, s).tensors["w"].tobytes() == a.tensors["w"].tobytes()
    assert interpolate_models(a, b, pre, 1.0, s).tensors["w"].tobytes() == b.tensors["w"].tobytes()
    out = interpolate_models(a, b, pre, 1.5, s)
    np.testing.assert_array_equal(out.tensors["w"], [-0.5, 1.5])
    prov = read_provenance(out)
    assert prov["op"] == "interpolate" and prov["extrapolated"] is True
    assert out.metadata["role"] == "pre"


def test_interpolation_errors():
    pre = Checkpoint({"w": np.zeros(2, dtype=np.float32)})
    s = derive_schema(pre)
    a = Checkpoint({"w": np.full(2, 3e38, dtype=np.float32)})
    b = Checkpoint({"w": np.full(2, -3e38, dtype=np.float32)})
    with pytest.raises(NumericError, match="non-finite"), np.errstate(over="ignore"):
        interpolate_models(a, b, pre, -1.0, s)
    with pytest.raises(NumericError):
        interpolate_models(a, b, pre, float("nan"), s)
    with pytest.raises(DataError, match="model B"):
        interpolate_models(a, Checkpoint({"v": np.zeros(2)}), pre, 0.5, s)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 40),
    st.sampled_from([0.0, 0.125, 0.25, 0.5, 0.75, 1.0]),
)
def test_interpolation_agrees_with_task_vector_form(seed, n, alpha):
    """(1-a) A + a B == pre + (1-a) tau_A + a tau_B for f32 weights and dyadic a."""
    rng = np.random.default_rng(seed)
    pre_w, a_w, b_w = (rng.standard_normal((3, n)) * 0.1).astype(np.float32)
    pre, a, b = Checkpoint({"w": pre_w}), Checkpoint({"w": a_w}), Checkpoint({"w": b_w})
    s = derive_schema(pre)
    direct = interpolate_models(a, b, pre, alpha, s).tensors["w"]
    tau = (1 - alpha) * extract_task_vector(a, pre, s).values + alpha * extract_task_vector(b, pre, s).values
    via_tau = apply_task_vector(pre, FlatVector(tau, s.fingerprint), 1.0, s).tensors["w"]
    scale = np.maximum.reduce([np.abs(a_w), np.abs(b_w), np.abs(pre_w)])
    assert np.all(np.abs(direct.astype(np.float64) - via_tau) <= np.spacing(scale))


def test_project_recovers_synthesized_coefficients(small_corpus, basis):
    w = SpeakerCoeff(np.linspace(0.2, -0.2, basis.rank))
    back = project(basis, reconstruct(basis, w))
    np.testing.assert_allclose(back.values, w.values, atol=1e-10)
