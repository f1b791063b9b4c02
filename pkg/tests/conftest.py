import numpy as np
import pytest

from ccb import kernels
from ccb.dataset import ShiftSpec, generate_toy_dataset


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def backend(request):
    if request.param and not kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    with kernels.use_numba(request.param):
        yield request.param


@pytest.fixture(scope="session")
def small_spec():
    return ShiftSpec(n_train=300, n_test=120, seed=3)


@pytest.fixture(scope="session")
def small_splits(small_spec):
    return generate_toy_dataset(small_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
