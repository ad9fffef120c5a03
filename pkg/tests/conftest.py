import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def report():
    """Record the one-line verdict of an acceptance criterion."""
    def _report(k, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {k}: {detail}"
        ACCEPTANCE_LINES[k] = line
        print(line)
        return passed
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
