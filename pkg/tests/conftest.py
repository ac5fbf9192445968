import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metamoe.encoder import MlpEncoder
from metamoe.model import MoEModel
from metamoe.numerics import make_rng

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return make_rng(1234)


def toy_model(K=3, d_in=5, hidden=4, rank=2, classes=2, confidence="mcd", seed=0, **kw):
    return MoEModel.create(MlpEncoder(d_in, hidden), K, classes, make_rng(seed), confidence=confidence, rank=rank, **kw)


def toy_batches(K=3, n=4, d_in=5, classes=2, seed=0):
    """Labelled batches in which every class occurs (MCD needs both)."""
    r = np.random.default_rng(seed)
    out = []
    for i in range(K):
        X = r.normal(size=(n, d_in)) + 0.5 * i
        y = np.arange(n) % classes
        out.append((X, r.permutation(y)))
    return out


@pytest.fixture
def model3():
    return toy_model()


@pytest.fixture
def batches3():
    return toy_batches()
