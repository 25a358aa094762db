import numpy as np
import pytest

from qcore.data import Dataset

DENSE_ARCH = {"input_dim": 4, "layers": [{"kind": "dense", "in_features": 4, "out_features": 3}]}

CONV_ARCH = {
    "input_shape": [1, 6],
    "layers": [
        {"kind": "conv1d", "in_channels": 1, "out_channels": 2, "kernel_size": 3},
        {"kind": "relu"},
        {"kind": "dense", "in_features": 8, "out_features": 3},
    ],
}


def blobs(n=200, dim=2, classes=2, sep=4.0, seed=0, id_offset=0) -> Dataset:
    """Well-separated Gaussian blobs."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers *= sep / np.linalg.norm(centers - centers.mean(0), axis=1, keepdims=True).min()
    y = np.arange(n) % classes
    x = centers[y] + 0.5 * rng.standard_normal((n, dim))
    return Dataset(np.arange(id_offset, id_offset + n), x, y, classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion
# ---------------------------------------------------------------------------

ACCEPTANCE_DETAILS: dict[int, str] = {}
_acceptance_outcomes: dict[int, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    if report.when == "call" or report.outcome != "passed":
        _acceptance_outcomes[n] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_outcomes):
        terminalreporter.write_line(f"criterion {n:2d}: {_acceptance_outcomes[n]}  {ACCEPTANCE_DETAILS.get(n, '')}")
