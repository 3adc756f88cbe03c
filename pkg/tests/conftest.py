import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed at session end."""

    def record(index: int, name: str, ok: bool, detail: str) -> bool:
        line = f"acceptance {index:2d}/13 {name:<28} {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[index] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for i in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[i])
