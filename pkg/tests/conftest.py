import numpy as np
import pytest
import torch

from simview.data import generate_synthetic_multiview

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_synthetic_multiview(4, ["chair", "tv"], 6, 32, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def criterion(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        request.config._acceptance.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config._acceptance:
        terminalreporter.section("acceptance criteria")
        for line in config._acceptance:
            terminalreporter.write_line(line)
