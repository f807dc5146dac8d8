import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dasattr import ddpm

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def schedule():
    return ddpm.make_linear_schedule(1000)


@pytest.fixture(scope="session")
def small_model():
    """Untrained 2-D predictor with hidden (6, 5): 173 parameters."""
    return ddpm.init_predictor(2, (6, 5), 1000, seed=3)


@pytest.fixture(scope="session")
def tiny_config():
    return ddpm.TrainConfig(epochs=150, lr=0.05, hidden=(8, 8), seed=0)


# acceptance summary -------------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``acceptance(number, passed, detail)`` records one PASS/FAIL summary line."""
    def record(number: int, passed: bool, detail: str):
        _ACCEPTANCE[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
