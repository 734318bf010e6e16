from pathlib import Path

import numpy as np
import pytest

GOLDEN_CSV = Path(__file__).parent / "data" / "table2_p4.csv"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_trits(rng, shape, zero_prob=1 / 3):
    pm = (1 - zero_prob) / 2
    return rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=shape, p=[pm, zero_prob, pm])


ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_criterion(number: int, ok: bool, summary: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {summary}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
