import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_report import LINES as ACCEPTANCE_LINES  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
