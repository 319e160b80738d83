import numpy as np
import pytest

from kdinterp.distill import TrainConfig, train
from kdinterp.model import conv_net
from kdinterp.synthgen import SynthConfig, generate_split

SMALL = SynthConfig(n_train=400, n_test=120, image_size=32, seed=7)


@pytest.fixture(scope="session")
def small_data():
    return generate_split(SMALL, "train"), generate_split(SMALL, "test")


@pytest.fixture(scope="session")
def small_model(small_data):
    """A briefly trained 32x32 student; good enough to have structure, cheap to build."""
    train_d, _ = small_data
    arch = conv_net((4, 8, 8), image_size=32)
    weights = train(arch, train_d, TrainConfig(epochs=2, batch_size=8, seed=1))
    return arch, weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one pass/fail line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
