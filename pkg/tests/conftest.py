import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dnt.config import load_config
from dnt.features import seeded_test_backbone

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def backbone():
    return seeded_test_backbone(seed=0, width_divisor=16, gain=10.0)


@pytest.fixture(scope="session")
def fast_cfg():
    """Small tracker budget for unit-level tracker tests."""
    return load_config(**{
        "train.learning_rate": "1e-2",
        "train.iterations": "5",
        "train.update_iterations": "2",
        "train.num_random": "2",
        "tracker.num_candidates": "60",
    })


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


_ACCEPTANCE: list[str] = []


class _Criterion:
    """Records one PASS/FAIL/SKIP line per acceptance criterion for the terminal summary."""

    def __call__(self, label: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
        return passed

    def skip(self, label: str, reason: str):
        _ACCEPTANCE.append(f"SKIP  {label}: {reason}")
        pytest.skip(reason)


@pytest.fixture
def criterion():
    return _Criterion()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
