import numpy as np
import pytest

from drfsample.schedule import make_schedule, make_step_grid
from drfsample.score import GaussianMixtureScore


@pytest.fixture(scope="session")
def sched():
    return make_schedule()


@pytest.fixture(scope="session")
def grid(sched):
    return make_step_grid(sched, 50)


def single_gaussian(mu, sched, variance=1.0):
    """One-component model with label 0."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    return GaussianMixtureScore(mu[None], sched, {0: [0]}, variance=variance)


@pytest.fixture
def mixture(sched):
    rng = np.random.default_rng(3)
    means = rng.normal(0.0, 1.5, size=(4, 3))
    return GaussianMixtureScore(means, sched, {0: [0, 1], 1: [2, 3]}, variance=0.4)


def schedule_from_alpha_bars(alpha_bars, kind="custom"):
    """Schedule with prescribed alpha_bar values (index 0 must be 1)."""
    from drfsample.schedule import NoiseSchedule

    ab = np.asarray(alpha_bars, dtype=np.float64)
    betas = np.concatenate([[0.0], 1.0 - ab[1:] / ab[:-1]])
    return NoiseSchedule(betas=betas, alpha_bars=ab, kind=kind)


def pytest_runtest_logreport(report):
    """Keep acceptance outcomes for the summary block."""
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        props = dict(report.user_properties)
        if "criterion" in props:
            _ACCEPTANCE.append((props["criterion"], report.passed, props.get("detail", "")))


_ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
