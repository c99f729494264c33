from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

REPO = Path(__file__).resolve().parent.parent
MNIST_DIR = REPO / "data" / "mnist"


@pytest.fixture
def rng():
    from decov.tensor import Rng
    return Rng(12345)


@pytest.fixture(scope="session")
def mnist():
    from decov.datasets import load_mnist
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("MNIST subset not built (scripts/build_mnist_subset.py)")
    return load_mnist(MNIST_DIR)


def batches(min_n=1, max_n=8, min_d=1, max_d=8, scale=1.0):
    """Hypothesis strategy: float64 N x d arrays with moderate entries."""
    from hypothesis import strategies as st
    from hypothesis.extra.numpy import arrays

    def build(shape):
        return arrays(np.float64, shape,
                      elements=st.floats(-scale, scale, allow_nan=False, width=64))

    return st.tuples(st.integers(min_n, max_n), st.integers(min_d, max_d)).flatmap(build)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
