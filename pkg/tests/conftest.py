import numpy as np
import pytest

VERDICTS: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for an acceptance criterion, then assert it."""
    def report(criterion: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}" + (f": {detail}" if detail else "")
        VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
