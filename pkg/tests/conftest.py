"""Collects one pass/fail line per acceptance criterion and prints them after the run."""

ACCEPTANCE_LINES: dict = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
