import os
import sys

import numpy as np
import pytest

from ibq import data


def mnist_dir():
    return os.environ.get("IBQ_MNIST_DIR", "/root/data/mnist")


def have_mnist():
    d = mnist_dir()
    return all(os.path.exists(os.path.join(d, f)) for f in (
        "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))


@pytest.fixture(scope="session")
def synthetic():
    return data.gen_synthetic(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance criterion lines together at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: (int(l.split()[1].rstrip("abc")), l.split()[1])):
            terminalreporter.write_line(line)
