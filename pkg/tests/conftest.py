import numpy as np
import pytest

from ifgan.config import TrainConfig
from ifgan.data import synth_corpus
from ifgan.training import PreparedCorpus


@pytest.fixture(scope="session")
def corpus_samples():
    return synth_corpus(20, 6, 4, 64, seed=0)


@pytest.fixture(scope="session")
def prepared(corpus_samples):
    return PreparedCorpus(corpus_samples, 64)


@pytest.fixture
def tiny_config():
    """Narrow networks so a training step takes milliseconds."""
    return TrainConfig(n_folds=5, batch_size=2, g_base_width=4, d_base_width=4, e_base_width=4,
                       e_stages=2, e_blocks=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
