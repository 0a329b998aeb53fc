import pytest
import torch

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, passed, detail):
        ACCEPTANCE_LINES.append((number, bool(passed), detail))
        print(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}")
