import numpy as np
import pytest

from qkdlink.codes import SyncCodeConfig


@pytest.fixture(scope="session")
def code():
    return SyncCodeConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def emit(capsys):
    """Print straight to the terminal, bypassing capture."""

    def _emit(line: str) -> None:
        with capsys.disabled():
            print(line)

    return _emit
