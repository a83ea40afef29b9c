import pytest

# (criterion, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE = []


@pytest.fixture
def record():
    def _record(criterion, passed, detail=""):
        ACCEPTANCE.append((criterion, bool(passed), detail))
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(
            f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        )
