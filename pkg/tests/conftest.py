import numpy as np
import pytest

from sipwarp.kernelcore import build_basis


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_basis(rng):
    X = rng.standard_normal((12, 3))
    return build_basis(X, gamma=0.3), X


ACCEPTANCE = {}


@pytest.fixture
def accept():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(num, ok, detail):
        ACCEPTANCE[num] = (bool(ok), detail)
        print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
