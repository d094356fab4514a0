import numpy as np
import pytest

from factorcd.factormodel import ModelDims
from factorcd.synthcorpus import GeneratorConfig, generate_corpus, generate_lexicon

TINY_DIMS = ModelDims(context_window=2, encoder_hidden=(24, 24), head_hidden=24, emb_left=4, emb_right=4,
                      emb_center=6, dropout=0.0)


@pytest.fixture(scope="session")
def toy_cfg():
    return GeneratorConfig(n_phonemes=4, dim=8, n_words=5, word_length=(2, 3), alpha=0.6, noise=0.6,
                           utterance_words=(1, 3), seed=11)


@pytest.fixture(scope="session")
def toy_lexicon(toy_cfg):
    return generate_lexicon(toy_cfg)


@pytest.fixture(scope="session")
def toy_corpus(toy_cfg, toy_lexicon):
    return generate_corpus(toy_cfg, toy_lexicon, 40, stream=0, prefix="tr")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
