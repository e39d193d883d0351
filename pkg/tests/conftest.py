import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance outcome; the lines are printed in the run summary."""
    results = request.config.stash.setdefault(_RESULTS, [])

    def record(number, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        results.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
