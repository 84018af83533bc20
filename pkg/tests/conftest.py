from pathlib import Path

import numpy as np
import pytest

from denn_svcca.net import glorot_init

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_net():
    return glorot_init([2, 5, 4, 1], 7)


@pytest.fixture
def deep_net():
    return glorot_init([2, 6, 6, 6, 6, 1], 11)


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""

    def report(number: int, ok: bool, detail: str) -> bool:
        request.config.acceptance_lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
