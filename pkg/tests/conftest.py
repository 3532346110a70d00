import sys
from pathlib import Path

from hypothesis import settings

HERE = Path(__file__).parent
for p in (HERE, HERE / "oracles"):
    if str(p) not in sys.path:
        sys.path.insert(0, str(p))

# one slow core: keep example counts modest and never time out on numba compilation
settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
