import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; also asserts ``ok``."""

    def record(n, ok, detail):
        _CRITERIA[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(_CRITERIA[n])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
