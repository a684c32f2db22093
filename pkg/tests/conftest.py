import pytest

from vlprompt.selftest import tiny_model

CRITERIA = []


@pytest.fixture()
def tiny():
    """A small frozen model with non-trivial weights; fast enough for unit tests."""
    return tiny_model(0).freeze()


@pytest.fixture(scope="session")
def criterion_log():
    """Append ``(number, passed, detail)``; lines are printed after the run."""
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(CRITERIA, key=lambda c: str(c[0])):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
