import pytest

RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Log one criterion outcome; the list is printed at the end of the session."""
    def _record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{name}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        RESULTS.append((name, ok, detail))
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(RESULTS, key=lambda r: int(r[0][1:].split()[0])):
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
