"""Collects the acceptance-criterion verdicts and prints them after the run."""
import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one line and returns ``ok``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
