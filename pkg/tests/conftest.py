import numpy as np
import pytest

from moleclue.model import TEST_DIMS, ModelParams
from moleclue.molgraph import make_synthetic_dataset
from moleclue.training import TrainConfig, fit

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def small_data():
    return make_synthetic_dataset(60, 11)


@pytest.fixture(scope="session")
def trained(small_data):
    """A quickly trained checkpoint; good enough to have structure, not accuracy."""
    return fit(small_data, TrainConfig(epochs=10, seed=5))


@pytest.fixture(scope="session")
def untrained():
    return ModelParams.init(TEST_DIMS, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
