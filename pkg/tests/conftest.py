import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line, then assert."""

    def check(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        assert passed, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
