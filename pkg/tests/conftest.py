import pytest

from bcnn.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)
