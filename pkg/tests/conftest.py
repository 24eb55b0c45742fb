import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line; printed again in the terminal summary."""
    def record(n, ok, detail=""):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
