import numpy as np
import pytest

from tvmgi.datamodel import Sample, SegmentAnnotation, Sentence, ShotBoundary
from tvmgi.evaluation import Candidate, Truth
from tvmgi.model import ModelConfig, init_params
from tvmgi.synthgen import GenConfig, gen_sample, make_pool


def make_sample(n_sentences=1, n_shots=1, L_f=4, d_in=3, annotations=None, origin=0, seed=0):
    """Hand-built sample; by default sentence 0 owns frames [1, 3) of shot 0."""
    rng = np.random.default_rng(seed)
    if annotations is None:
        annotations = [SegmentAnnotation(0, 0, 1, 3, 1)]
    return Sample(
        sample_id="hand",
        sentences=tuple(Sentence(i, f"text_features[{i}]", 2) for i in range(n_sentences)),
        shots=tuple(ShotBoundary(j, origin + j * L_f, origin + (j + 1) * L_f) for j in range(n_shots)),
        frames_per_shot=L_f,
        annotations=tuple(annotations),
        text_features=rng.standard_normal((n_sentences, d_in)),
        frame_features=rng.standard_normal((n_shots, L_f, d_in)),
    )


@pytest.fixture
def minimal_sample():
    return make_sample()


@pytest.fixture(scope="session")
def small_gen():
    return GenConfig(d_in=8, concept_count=32, cluster_count=4)


@pytest.fixture(scope="session")
def small_pool(small_gen):
    return make_pool(small_gen)


@pytest.fixture(scope="session")
def small_samples(small_gen, small_pool):
    return [gen_sample(small_gen, s, small_pool) for s in range(6)]


@pytest.fixture(scope="session")
def tiny_model():
    cfg = ModelConfig(d=16, n_layers=1, n_heads=2, d_in=8)
    return cfg, init_params(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_instance(r, max_sentences=3, max_shots=5, L_f=6):
    """Random (preds, gts) script on absolute frames; shot j covers [j*L_f, (j+1)*L_f)."""
    n_sent = int(r.integers(1, max_sentences + 1))
    n_shots = int(r.integers(1, max_shots + 1))

    def segment(j):
        s = int(r.integers(0, L_f))
        e = int(r.integers(s + 1, L_f + 1))
        return j * L_f + s, j * L_f + e

    preds, gts = [], []
    for _ in range(n_sent):
        shots = r.permutation(n_shots)[:int(r.integers(0, n_shots + 1))]
        ranks = r.permutation(len(shots)) + 1
        gts.append([Truth(*segment(int(j)), int(rk)) for j, rk in zip(shots, ranks)])
        # coarse scores so ties across sentences occur
        cands = [Candidate(*segment(int(r.integers(0, n_shots))), float(r.integers(0, 4)) / 4)
                 for _ in range(int(r.integers(0, 6)))]
        preds.append(sorted(cands, key=lambda c: -c.score))
    return preds, gts


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict and fail the test if it is not met."""
    def record(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
