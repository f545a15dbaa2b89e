import numpy as np
import pytest

from mixuplr.numeric import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    # independent generator for building oracle inputs
    return np.random.default_rng(20240607)


def central_diff(f, v, h=1e-5):
    """Central finite-difference gradient of scalar f at array v."""
    v = np.array(v, dtype=np.float64)
    g = np.zeros_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e.flat[i] = h
        g.flat[i] = (f(v + e) - f(v - e)) / (2 * h)
    return g


def max_rel_err(a, b):
    """Max abs deviation normalized by the largest oracle entry."""
    scale = max(np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.failed:
        _ACCEPTANCE[name] = _ACCEPTANCE.get(name, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if _ACCEPTANCE[name] else 'FAIL'}  {name}")
