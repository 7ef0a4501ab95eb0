import numpy as np
import pytest

from sharpjudge import Dataset

ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"ACCEPTANCE {criterion:>2} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def small_dataset(rng, n=20, judges=3, binary=False):
    z = rng.integers(1, judges + 1, n).astype(float)
    d = rng.integers(0, 2, n).astype(float)
    if binary:
        y = rng.integers(0, 2, n).astype(float)
    else:
        # mix interior values with grid points to exercise closed cell edges
        y = rng.random(n)
        y[rng.random(n) < 0.3] = rng.choice([0.0, 1 / 3, 0.5, 2 / 3, 1.0])
    return Dataset(y=y, d=d, z=z, z_names=("judge",))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
