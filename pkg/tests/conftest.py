import numpy as np
import pytest

from sanreid import kernels
from sanreid.synth import synth_generate

ACCEPTANCE_RESULTS = []


def _available_backends():
    names = ["numpy"]
    try:
        kernels.backend("numba")
        names.append("numba")
    except RuntimeError:
        pass
    return names


@pytest.fixture(params=_available_backends())
def impl(request):
    return kernels.backend(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """6 identities x 4 images at 64 px; enough for plumbing tests."""
    root = tmp_path_factory.mktemp("small_synth")
    return synth_generate(root, num_ids=6, imgs_per_id=4, num_attrs=3, seed=1, size=64, holdout=2)


@pytest.fixture
def acceptance_log():
    def log(criterion, passed, detail=""):
        ACCEPTANCE_RESULTS.append((criterion, passed, detail))

    return log


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE_RESULTS:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"[{status}] {criterion}: {detail}")
