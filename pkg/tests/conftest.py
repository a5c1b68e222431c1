import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record the one-line outcome of an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> None:
        _VERDICTS[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
        print(_VERDICTS[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
