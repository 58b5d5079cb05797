import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Report one acceptance criterion; the lines are repeated in the terminal summary."""
    def report(num, name, passed, detail=""):
        line = f"criterion {num:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        request.config.stash.setdefault(_LINES, []).append((num, line))
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
