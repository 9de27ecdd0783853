import pytest

_LINES = []


@pytest.fixture(scope="session")
def report():
    """Collects one summary line per acceptance criterion."""
    def add(tag, ok, detail):
        _LINES.append(f"{tag} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
