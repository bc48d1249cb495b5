import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record an acceptance outcome; the summary prints one line per criterion."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append((criterion, bool(ok), detail))
        print(f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance")
    for criterion, ok, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}")
