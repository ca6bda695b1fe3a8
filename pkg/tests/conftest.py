import numpy as np
import pytest

from mrmae.dataset import LayeredDataset, PatchLayer
from mrmae.synth import timestamps_from


def make_ds(data, layers, is_train=None, start=(2000, 1)):
    """Small in-memory dataset; ``layers`` is a list of ``(name, rows, cols)``."""
    data = np.asarray(data, dtype=np.float64)
    k = data.shape[0]
    if is_train is None:
        is_train = np.ones(k, dtype=bool)
    return LayeredDataset(
        data, tuple(PatchLayer(*spec) for spec in layers), timestamps_from(start, k), np.asarray(is_train, dtype=bool)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """``report(number, ok, detail)`` records one acceptance line and prints it."""

    def _report(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
