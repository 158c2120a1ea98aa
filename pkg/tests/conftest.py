import pytest

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion; printed in the terminal summary."""

    def record(number, name, passed, detail=""):
        line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE[(number, name)] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[key])
