import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from eigenmerge.ckptio import read_checkpoint  # noqa: E402
from eigenmerge.synthgen import CorpusSpec, Manifest, generate_corpus  # noqa: E402
from eigenmerge.taskvec import derive_schema, extract_task_vector  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class Corpus:
    def __init__(self, root):
        self.manifest = Manifest.load(root)
        self.pre = self.manifest.pre()
        self.schema = derive_schema(self.pre, self.manifest.param_filter)
        self.finetuned = [read_checkpoint(p) for p in self.manifest.speaker_paths]
        self.vectors = [extract_task_vector(ft, self.pre, self.schema) for ft in self.finetuned]
        self.labels = self.manifest.labels


def make_corpus(root, **kw) -> Corpus:
    generate_corpus(CorpusSpec(**kw), root)
    return Corpus(root)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Default planted-factor model at a small M (fast, same structure)."""
    return make_corpus(tmp_path_factory.mktemp("small"), seed=11, M=4000)


@pytest.fixture(scope="session")
def noiseless_corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("noiseless"), seed=5, M=3000, noise_scale=0.0, latent_dims=0)


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
