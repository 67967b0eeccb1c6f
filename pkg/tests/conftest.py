import pytest

ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for one acceptance criterion, then assert it."""

    def check(key, passed, detail):
        ACCEPTANCE[key] = (bool(passed), detail)
        assert passed, f"{key}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: [int(p) if p.isdigit() else p for p in k.replace(".", " ").split()]):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {key}: {detail}")
