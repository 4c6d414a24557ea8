import numpy as np
import pytest

from fedselect.data import LabeledDataset
from fedselect.numkit import RngStream


def blobs(seed: int, per_class: int = 50, centers=((-4.0, 0.0), (4.0, 0.0)), sigma: float = 0.5) -> LabeledDataset:
    r = RngStream(seed, "test-blobs")
    centers = np.asarray(centers)
    y = np.repeat(np.arange(len(centers)), per_class)
    x = centers[y] + sigma * r.gaussian(len(y) * centers.shape[1]).reshape(len(y), -1)
    return LabeledDataset(x, y, len(centers), (centers.shape[1],))


@pytest.fixture
def two_blobs():
    return blobs(0)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record a criterion's outcome so the terminal summary can list it."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {detail}")
