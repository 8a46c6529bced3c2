import numpy as np
import pytest

from videotransunet.autodiff import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


# ---------------------------------------------------------------- acceptance summary
CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = (marker.args[0], marker.args[1])
    if rep.failed:
        CRITERIA[key] = "FAIL"
    elif rep.when == "call" and key not in CRITERIA:
        CRITERIA[key] = "PASS" if rep.passed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, name), status in sorted(CRITERIA.items()):
        terminalreporter.write_line(f"criterion {number} ({name}): {status}")
