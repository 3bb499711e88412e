import numpy as np
import pytest

from cardiomotion.autodiff import Prng, Tensor


@pytest.fixture
def prng():
    return Prng(1234)


def t64(prng: Prng, shape, std: float = 1.0, requires_grad: bool = True) -> Tensor:
    """Random float64 tensor for gradient-check mode."""
    return Tensor(prng.normal(shape, std, dtype=np.float64), requires_grad=requires_grad)
