import numpy as np
import pytest

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record():
    def _record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
