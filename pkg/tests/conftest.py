import warnings

import numpy as np
import pytest

from revsym.dynamics import DrivenPendulumSystem, HenonHeilesSystem, IntegratorConfig, generate_dataset


def fd_grad(f, theta, idx, h=1e-6):
    """Central differences of scalar ``f`` at ``theta`` along coordinates ``idx``."""
    out = []
    for i in idx:
        e = np.zeros_like(theta)
        e[i] = h
        out.append((f(theta + e) - f(theta - e)) / (2 * h))
    return np.array(out)


def assert_close_rel(analytic, numeric, rel, floor=1e-9):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    tol = rel * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    assert np.all(err <= tol), f"max violation {np.max(err - tol):.3e}; max err {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def hh():
    return HenonHeilesSystem()


@pytest.fixture(scope="session")
def pendulum():
    return DrivenPendulumSystem()


@pytest.fixture(scope="session")
def cfg():
    return IntegratorConfig()


@pytest.fixture(scope="session")
def hh_data(hh, cfg):
    return generate_dataset(hh, 300, 7, cfg)


@pytest.fixture(scope="session")
def pendulum_data(pendulum, cfg):
    return generate_dataset(pendulum, 100, 7, cfg)


@pytest.fixture(autouse=True)
def _quiet_overflow():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


# acceptance verdicts, filled in by test_acceptance and printed after the run
ACCEPTANCE: list = []


def record(criterion: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE.append((criterion, passed, detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")
