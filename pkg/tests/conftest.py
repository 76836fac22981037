from __future__ import annotations

import numpy as np
import pytest

from tierroute.config import RunConfig, WorkloadSection
from tierroute.experiment import build_pipeline
from tierroute.portfolio import default_portfolio
from tierroute.workload import WorkloadConfig


@pytest.fixture(scope="session")
def portfolio():
    return default_portfolio()


@pytest.fixture(scope="session")
def wcfg():
    return WorkloadConfig()


@pytest.fixture(scope="session")
def taus(wcfg):
    return wcfg.taus()


@pytest.fixture(scope="session")
def reference():
    """Default config, seed 0: the reference run used by directional checks."""
    return build_pipeline(RunConfig(seed=0))


@pytest.fixture(scope="session")
def small_pipeline():
    cfg = RunConfig(seed=1, workload=WorkloadSection(n_train=2000, n_calib=2000, n_test=2000))
    return build_pipeline(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: one line per criterion in the terminal summary
_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
