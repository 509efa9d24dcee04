import pytest


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion and fail the test
    when the criterion does not hold."""
    lines = request.config._acceptance_lines

    def record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
