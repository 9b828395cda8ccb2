import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# (number, title, verdict, detail) rows filled in by test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, verdict, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"[{verdict}] {n:>2}. {title}: {detail}")
