import sys
from pathlib import Path

# helper modules (oracle, toys) live next to the tests
sys.path.insert(0, str(Path(__file__).resolve().parent))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
