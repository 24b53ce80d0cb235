import pytest

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(key: str, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {key}: {title} ({detail})"
        ACCEPTANCE_LINES[key] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k.rstrip("abcdefghijklmnopqrstuvwxyz")), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
