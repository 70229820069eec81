import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdicts(request):
    """criterion number -> (passed, detail); printed after the run."""
    return request.config.stash.setdefault(_VERDICTS, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    found = config.stash.get(_VERDICTS, {})
    if not found:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(found):
        ok, detail = found[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
