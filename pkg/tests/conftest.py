import numpy as np
import pytest
import torch

torch.set_num_threads(1)

# (number, name, passed, detail) rows filled in by the acceptance suite
CRITERIA: list = []
CRITERIA_NAMES = {1: "theory suite", 2: "residual suite", 3: "objective suite", 4: "metrics suite",
                  5: "end-to-end learning", 6: "ablation orderings", 7: "robustness trend", 8: "determinism"}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Record and assert one acceptance criterion; every row is echoed in the terminal summary."""

    def check(number: int, name: str, passed: bool, detail: str = ""):
        CRITERIA.append((number, name, bool(passed), detail))
        assert passed, f"criterion {number} ({name}) failed: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    rows = list(CRITERIA)
    seen = {r[0] for r in rows}
    rows += [(n, name, False, "no result (errored, skipped or deselected)")
             for n, name in CRITERIA_NAMES.items() if n not in seen]
    for number, name, passed, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")
