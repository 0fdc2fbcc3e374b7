import numpy as np
import pytest

from fine.data import make_dataset
from fine.diffusion import DiffusionSchedule
from fine.dit import DiTConfig


@pytest.fixture
def tiny_cfg():
    """Small enough for gradient checks: 4 tokens, width 8."""
    return DiTConfig(image_size=4, patch=2, width=8, heads=2, depth=2, num_classes=2,
                     timesteps=20, rank=4, group_size=2)


@pytest.fixture
def small_cfg():
    return DiTConfig(width=16, heads=2, depth=2, timesteps=50, rank=8, group_size=4)


@pytest.fixture
def small_sched():
    return DiffusionSchedule(50)


@pytest.fixture(scope="session")
def shapes_a():
    return make_dataset("shapes-A", 256, 8, seed=0)


@pytest.fixture(scope="session")
def shapes_b():
    return make_dataset("shapes-B", 256, 8, seed=0)


@pytest.fixture
def rs():
    return np.random.default_rng(1234)


_VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Print and record one pass/fail line per acceptance criterion, then assert it."""

    def report(number, title, ok, detail=""):
        line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        _VERDICTS.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
