import numpy as np
import pytest

from sapgdeconv.myula import make_rng

_VERDICTS: dict[int, str] = {}


def record_verdict(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    _VERDICTS[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[k])


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def small_image(rng):
    """Piecewise-constant 32x32 image with a little texture, values in [0, 255]."""
    x = np.full((32, 32), 60.0)
    x[8:24, 8:24] = 180.0
    x[12:20, 4:28] += 40.0
    return x + 5.0 * rng.random((32, 32))
