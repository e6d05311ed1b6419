import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE = {}


def record(ac: str, ok: bool, detail: str):
    """Store one acceptance verdict; printed live and again in the terminal summary."""
    line = f"{ac}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[ac] = line
    print(line)
    return ok


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(ACCEPTANCE, key=lambda a: int(a[2:])):
        terminalreporter.write_line(ACCEPTANCE[ac])
