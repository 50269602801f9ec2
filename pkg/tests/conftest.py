import numpy as np
import pytest

from exclique import _accel
from exclique.chain import TxBatch


def make_batch(start: int, count: int, seed: int = 0, payload_size: int = 110) -> TxBatch:
    g = np.arange(start, start + count, dtype=np.int64)
    ids = _accel.txid_words(g, seed)
    fee = 1 + (ids[:, 1] % np.uint64(10)).astype(np.int64)
    return TxBatch(ids, payload_size, g, fee)


@pytest.fixture
def batch():
    return make_batch(0, 50)


# One line per acceptance criterion, printed after the run.
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
