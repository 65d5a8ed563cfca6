import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Call with ``(passed, detail)``; records and prints one PASS/FAIL line, then asserts."""
    name = request.node.name

    def report(passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
