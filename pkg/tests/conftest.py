import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

# (criterion, ok, detail) rows collected by the acceptance suite
CRITERIA = []


@pytest.fixture
def criterion():
    def record(name, ok, detail):
        CRITERIA.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
