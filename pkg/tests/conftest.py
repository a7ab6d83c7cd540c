import pytest

from bdfoa import solve_y0

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def y0():
    return solve_y0()


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def _record(label: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
