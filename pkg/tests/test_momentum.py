import logging

import numpy as np
import pytest

from src.config import ModelConfig, MomentumConfig
from src.errors import ShapeError
from src.model import ParameterSet, init_parameters
from src.momentum import FeatureQueue, ema_update, logger
from src.numerics import Tensor
from src.rng import make_rng

logger.setLevel(logging.DEBUG)


@pytest.fixture
def config() -> ModelConfig:
    return ModelConfig(
        dim=4,
        num_heads=2,
        layers_text=1,
        layers_vision=1,
        layers_fusion=1,
        text_len=3,
        grid_size=2,
        patch_dim=3,
        vocab_size=8,
        mask_token_id=7,
        proj_dim=2,
    )


@pytest.fixture
def student(config: ModelConfig) -> ParameterSet:
    return init_parameters(config, make_rng(0, "tests", "student"))


@pytest.fixture
def teacher(config: ModelConfig) -> ParameterSet:
    return init_parameters(config, make_rng(1, "tests", "teacher")).clone(requires_grad=False)


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0])
def test_ema_boundaries(teacher: ParameterSet, student: ParameterSet, beta: float) -> None:
    before = teacher.flat()
    ema_update(teacher, student, beta)
    assert np.array_equal(teacher.flat(), beta * before + (1.0 - beta) * student.flat())
    if beta == 0.0:
        assert np.array_equal(teacher.flat(), student.flat())
    if beta == 1.0:
        assert np.array_equal(teacher.flat(), before)
    assert not any(t.requires_grad for t in teacher)


def test_ema_hand_value() -> None:
    teacher = ParameterSet({"w": Tensor([2.0])})
    student = ParameterSet({"w": Tensor([4.0], requires_grad=True)})
    ema_update(teacher, student, 0.5)
    assert teacher["w"].data.tolist() == [3.0]


def test_ema_decays_geometrically(teacher: ParameterSet, student: ParameterSet) -> None:
    gap0 = teacher.flat() - student.flat()
    for _ in range(50):
        ema_update(teacher, student, 0.9)
    gap = teacher.flat() - student.flat()
    assert np.max(np.abs(gap - 0.9**50 * gap0)) <= 1e-12


def test_ema_rejects_bad_inputs(teacher: ParameterSet, student: ParameterSet) -> None:
    with pytest.raises(ValueError, match="beta"):
        ema_update(teacher, student, 1.5)
    with pytest.raises(ShapeError):
        ema_update(ParameterSet({"w": Tensor([1.0])}), student, 0.5)


def test_cosine_schedule_moves_from_beta_to_beta_end() -> None:
    schedule = MomentumConfig(beta=0.9, schedule="cosine", beta_end=0.99)
    assert schedule.beta_at(0, 11) == pytest.approx(0.9)
    assert schedule.beta_at(5, 11) == pytest.approx(0.945)
    assert schedule.beta_at(10, 11) == pytest.approx(0.99)
    assert MomentumConfig(beta=0.95).beta_at(7, 11) == 0.95


def test_queue_fifo_eviction() -> None:
    queue = FeatureQueue.empty(size=3, dim=2)
    unit = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    assert queue.enqueue(unit[:3], np.array([0, 1, 2])).tolist() == [0, 1, 2]
    assert queue.enqueue(unit[3:], np.array([3])).tolist() == [0]
    vectors, ids = queue.contents()
    assert ids.tolist() == [1, 2, 3]
    assert np.array_equal(vectors, unit[1:])


def test_queue_count_saturates_at_capacity() -> None:
    queue = FeatureQueue.empty(size=5, dim=2)
    batch = np.tile([[0.6, 0.8]], (2, 1))
    for total in range(2, 12, 2):
        queue.enqueue(batch, np.array([7, 7]))
        assert queue.count == min(total, 5)
        vectors, ids = queue.contents()
        assert vectors.shape[0] == ids.shape[0] == queue.count
        assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0)


def test_queue_rejects_oversized_or_non_unit_batches() -> None:
    queue = FeatureQueue.empty(size=2, dim=2)
    with pytest.raises(ValueError, match="cannot enqueue 3"):
        queue.enqueue(np.tile([[1.0, 0.0]], (3, 1)), np.arange(3))
    with pytest.raises(ValueError, match="unit vectors"):
        queue.enqueue(np.array([[2.0, 0.0]]), np.array([0]))


def test_random_queue_is_full_and_seeded() -> None:
    a = FeatureQueue.random(6, 3, make_rng(0, "queue"))
    b = FeatureQueue.random(6, 3, make_rng(0, "queue"))
    assert a.count == 6
    assert np.array_equal(a.vectors, b.vectors)
    assert np.allclose(np.linalg.norm(a.vectors, axis=1), 1.0)
    assert np.all(a.item_ids == -1)


def test_queue_copy_is_independent() -> None:
    queue = FeatureQueue.empty(size=2, dim=2)
    staged = queue.copy()
    staged.enqueue(np.array([[1.0, 0.0]]), np.array([5]))
    assert queue.count == 0
    assert staged.count == 1
