import time
from contextlib import contextmanager

import pytest

ACCEPTANCE_LINES: list[str] = []


@contextmanager
def _criterion(number: int, title: str):
    notes: list[str] = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        line = f"criterion {number} FAIL  {title} ({time.perf_counter() - start:.1f}s): {exc!s:.300}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    detail = "; ".join(notes)
    line = f"criterion {number} PASS  {title} ({time.perf_counter() - start:.1f}s)" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as notes:`` records one PASS/FAIL line for the summary."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
