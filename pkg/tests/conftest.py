import pytest

_RESULTS: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one summary line for an acceptance criterion."""

    def _report(number: int, ok: bool, detail: str):
        _RESULTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_RESULTS[number])
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance")
        for k in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[k])
