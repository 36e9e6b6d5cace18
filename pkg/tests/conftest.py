import numpy as np
import pytest

from attribank import autodiff as ad


@pytest.fixture(autouse=True)
def clean_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
