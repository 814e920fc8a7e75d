"""Collects one verdict line per acceptance criterion and prints them in the
terminal summary, after the pass/fail of the test functions themselves."""
import pytest

_LINES: list[str] = []


class Report:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str):
        self.details.append(text)
        print(f"[criterion {self.number}] {text}")

    def verdict(self, ok: bool, summary: str):
        line = f"CRITERION {self.number} {'PASS' if ok else 'FAIL'}: {self.title}: {summary}"
        _LINES.append(line)
        print(line)
        assert ok, summary


@pytest.fixture
def criterion():
    return Report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
