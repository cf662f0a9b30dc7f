import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(n, ok: bool, detail: str) -> None:
        label = f"criterion {n:>2}" if isinstance(n, int) else str(n)
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines, key=lambda n: (0, n, "") if isinstance(n, int) else (1, 0, str(n))):
        terminalreporter.write_line(lines[n])
