import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one acceptance line: report(criterion, passed, detail)."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
