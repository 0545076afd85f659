import numpy as np
import pytest
from hypothesis import settings

from maskgen.head import GaussianMixture
from maskgen.masking import ToyDataset

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def pair_dataset() -> ToyDataset:
    """N=2, V=2 with P(00)=P(11)=0.4 and P(01)=P(10)=0.1."""
    states = [([0, 0], 0.4), ([0, 1], 0.1), ([1, 0], 0.1), ([1, 1], 0.4)]
    return ToyDataset.from_dict({"N": 2, "V": 2, "num_classes": 0,
                                 "states": [{"tokens": t, "prob": p} for t, p in states]})


# pinned three-component benchmark for the diffusion head
GM_BENCH = {"weights": [0.3, 0.5, 0.2], "means": [[-2.0], [0.5], [3.0]], "vars": [[0.09], [0.25], [0.04]]}


@pytest.fixture
def pair():
    return pair_dataset()


@pytest.fixture
def gm_bench():
    return GaussianMixture.from_dict(GM_BENCH)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
