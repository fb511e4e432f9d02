"""Shared fixtures and the acceptance summary printed at the end of the run."""

import pytest

CRITERIA: dict[int, tuple[bool, str]] = {}
CRITERION_NAMES = {
    1: "transform reconstruction and energy",
    2: "gradient oracle",
    3: "loss invariants",
    4: "stage-two detachment",
    5: "distillation lift over baseline",
    6: "mask and band-group ordering",
    7: "dwt/dct/dft grid completes",
    8: "bit-exact reruns",
}


@pytest.fixture
def criterion():
    """Record the outcome of acceptance criterion ``n`` for the summary."""
    def record(n: int, passed: bool, detail: str) -> bool:
        previous = CRITERIA.get(n)
        if previous is not None:
            passed = passed and previous[0]
            detail = f"{previous[1]}; {detail}"
        CRITERIA[n] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERION_NAMES.items():
        if n in CRITERIA:
            passed, detail = CRITERIA[n]
            terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n}. {name}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {n}. {name}: not run")
