import os
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent


def data_root() -> Path:
    return Path(os.environ.get("DYBNN_DATA", REPO / "data"))


@pytest.fixture(scope="session")
def mnist():
    from dybnn.datasets import load_mnist

    root = data_root() / "mnist"
    if not root.is_dir():
        pytest.skip(f"MNIST not found under {root}")
    return load_mnist(root)


@pytest.fixture(scope="session")
def cifar10():
    from dybnn.datasets import load_cifar10

    root = data_root() / "cifar10"
    if not root.is_dir():
        pytest.skip(f"CIFAR-10 not found under {root}")
    return load_cifar10(root)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
