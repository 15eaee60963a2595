import numpy as np
import pytest

from rmcdefense.data import Dataset
from rmcdefense.model import ArchSpec, init_params
from rmcdefense.numcore import RngStream


def random_model(shape="8-16-3", seed=0):
    return init_params(ArchSpec.parse(shape), RngStream(seed))


def random_dataset(n=60, d=8, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(0.1 + 0.8 * rng.random((n, d)), rng.integers(0, classes, n), classes)


@pytest.fixture
def make_model():
    return random_model


@pytest.fixture
def make_dataset():
    return random_dataset


_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[name]
        number = int(name.split("_")[2])
        label = name.split("_", 3)[3].replace("_", " ")
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:2d} {status}  {label}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
