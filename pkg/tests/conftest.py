import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record():
    """record(criterion, passed, detail) stores one summary line per criterion."""

    def _record(criterion: int, passed: bool, detail: str) -> bool:
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {status}  {detail}"
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
