import logging

import numpy as np
import pytest

from src.config import OptimizerConfig
from src.errors import NonFiniteError, ShapeError
from src.model import ParameterSet
from src.numerics import Tensor
from src.optim import AdamW, logger

logger.setLevel(logging.DEBUG)


@pytest.fixture
def params() -> ParameterSet:
    return ParameterSet(
        {
            "w": Tensor(np.ones((2, 2)), requires_grad=True),
            "b": Tensor(np.ones(2), requires_grad=True),
        }
    )


@pytest.fixture
def optimizer(params: ParameterSet) -> AdamW:
    return AdamW(params, OptimizerConfig(lr=0.1, weight_decay=0.5))


def test_first_step_moves_each_coordinate_by_lr(params: ParameterSet, optimizer: AdamW) -> None:
    optimizer.step({params["w"]: np.full((2, 2), 0.5), params["b"]: np.full(2, -2.0)})
    assert optimizer.step_count == 1
    assert np.allclose(params["w"].data, 1.0 * (1.0 - 0.05) - 0.1, atol=1e-6)
    assert np.allclose(params["b"].data, 1.1, atol=1e-6)


def test_missing_gradients_only_decay_matrices(params: ParameterSet, optimizer: AdamW) -> None:
    optimizer.step({})
    assert np.allclose(params["w"].data, 0.95)
    assert np.array_equal(params["b"].data, np.ones(2))


def test_bad_gradients_are_rejected(params: ParameterSet, optimizer: AdamW) -> None:
    with pytest.raises(ShapeError):
        optimizer.step({params["b"]: np.zeros(3)})
    with pytest.raises(NonFiniteError, match="gradient of w"):
        optimizer.step({params["w"]: np.full((2, 2), np.nan)})
