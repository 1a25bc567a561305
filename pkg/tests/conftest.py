import numpy as np
import pytest

from supradiff import InterCoupling, LayerSpec, MultilayerNetwork

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def two_layer():
    """Two layers of two nodes: one edge in layer 1, identity coupling."""
    return MultilayerNetwork(
        [LayerSpec(1, [[0, 1], [1, 0]], 1.0), LayerSpec(2, np.zeros((2, 2)), 1.0)],
        [InterCoupling(1, 2, np.eye(2), 1.0)],
    )


@pytest.fixture
def two_layer_dict():
    return {
        "layers": [
            {"id": 1, "n": 2, "edges": [[1, 2, 1.0]], "d": 1.0},
            {"id": 2, "n": 2, "edges": [], "d": 1.0},
        ],
        "couplings": [{"from": 1, "to": 2, "edges": [[1, 1, 1.0], [2, 2, 1.0]], "d": 1.0}],
    }


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
