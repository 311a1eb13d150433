import re

import numpy as np
import pytest

from ovstream.core import LabelEmbeddingTable

_ACCEPTANCE_OUTCOMES = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid or report.when != "call":
        return
    match = re.search(r"criterion_(\d+)", report.nodeid)
    if match:
        _ACCEPTANCE_OUTCOMES[int(match.group(1))] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for num in sorted(_ACCEPTANCE_OUTCOMES):
        outcome = _ACCEPTANCE_OUTCOMES[num]
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  criterion {num}: {word}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_table():
    """Four unit labels in 8 dims, fixed seed."""
    gen = np.random.default_rng(99)
    return LabelEmbeddingTable({i: gen.standard_normal(8) for i in range(4)})


def random_unit(gen, dim):
    v = gen.standard_normal(dim)
    return v / np.linalg.norm(v)
