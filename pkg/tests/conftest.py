from pathlib import Path

import numpy as np
import pytest

from gmmtransfer.imageio import load_image

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def source32():
    return load_image(FIXTURES / "source32.png")


@pytest.fixture(scope="session")
def example48():
    return load_image(FIXTURES / "example48.png")


@pytest.fixture(scope="session")
def source64():
    return load_image(FIXTURES / "source64.png")


@pytest.fixture(scope="session")
def example64():
    return load_image(FIXTURES / "example64.png")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
