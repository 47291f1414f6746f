import numpy as np
import pytest

from ntf import losses as L
from ntf.data import gen_synthetic_corpus, load_manifest
from ntf.tensor import Rng, Tensor


def unit_rows(rng, n, c):
    z = rng.normal(size=(n, c))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def shuffled_sources(rng, n_sources):
    ids = np.repeat(np.arange(n_sources), 2)
    return ids[rng.permutation(len(ids))]


def labels_for(rng, source_id):
    """Per-source labels with at least two views of each class."""
    sources = np.unique(source_id)
    while True:
        lab = rng.integers(0, 2, size=len(sources))
        per_row = lab[np.searchsorted(sources, source_id)]
        if min(np.sum(per_row == 0), np.sum(per_row == 1)) >= 2:
            return per_row


def view(Z, source_id, label=None):
    return L.PairedBatchView(Tensor(Z, dtype=np.float64), source_id, label)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small four-family corpus: 24 test images per family, 96 real + 48 fakeA train."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    gen_synthetic_corpus(str(out), 24, 32, Rng(7))
    return load_manifest(str(out / "manifest.tsv")), out


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.lines():
            terminalreporter.write_line(line)
