import logging
from pathlib import Path

import numpy as np
import pytest

from src.config import CorpusConfig, GroupingConfig, ModelConfig
from src.datagen import training_corpus
from src.errors import ShapeError
from src.model import DualModel
from src.rng import make_rng
from src.sampler import (
    SampleQueue,
    brute_force_group,
    group_subqueue,
    logger,
    plan_epoch,
    same_item_rate,
)
from src.training import collect_features

logger.setLevel(logging.DEBUG)

HAND_SIMILARITY = np.array([[0.0, 0.9, 0.1], [0.9, 0.0, 0.5], [0.1, 0.5, 0.0]])


def _grouping(**overrides: object) -> GroupingConfig:
    values: dict[str, object] = {
        "strategy": "semihard",
        "s": 3,
        "efn": True,
        "collect_queue_size": 8,
        "subqueue_size": 8,
        "batch_size": 2,
    }
    values.update(overrides)
    return GroupingConfig.model_validate(values)


@pytest.fixture
def queue() -> SampleQueue:
    """32 examples of 8 items, four views each; views of one item point the same way."""
    rng = make_rng(0, "tests", "sampler")
    item_ids = np.repeat(np.arange(8), 4)
    centres = rng.normal(size=(8, 6))
    text = centres[item_ids] + 0.05 * rng.normal(size=(32, 6))
    image = centres[item_ids] + 0.05 * rng.normal(size=(32, 6))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    image /= np.linalg.norm(image, axis=1, keepdims=True)
    return SampleQueue(np.arange(32), item_ids, text, image)


def test_hand_trace_hardest() -> None:
    config = _grouping(strategy="hardest", efn=False, collect_queue_size=4, subqueue_size=4)
    order = group_subqueue(
        HAND_SIMILARITY, HAND_SIMILARITY, np.arange(3), config, make_rng(0, "tests"), start_index=0
    )
    assert order == [0, 1, 2]


def test_hand_trace_semihard_rank_two() -> None:
    config = _grouping(s=2, efn=False, collect_queue_size=4, subqueue_size=4)
    order = group_subqueue(
        HAND_SIMILARITY, HAND_SIMILARITY, np.arange(3), config, make_rng(0, "tests"), start_index=0
    )
    assert order == [0, 2, 1]


def test_rank_beyond_remaining_takes_the_least_similar() -> None:
    config = _grouping(s=5, efn=False)
    order = group_subqueue(
        HAND_SIMILARITY, HAND_SIMILARITY, np.arange(3), config, make_rng(0, "tests"), start_index=1
    )
    assert order == [1, 2, 0]


@pytest.mark.parametrize("strategy", ["hardest", "semihard"])
@pytest.mark.parametrize("efn", [False, True])
def test_grouping_matches_brute_force(strategy: str, efn: bool) -> None:
    config = _grouping(strategy=strategy, efn=efn)
    for seed in range(100):
        rng = make_rng(seed, "tests", "oracle")
        q_v2t = rng.normal(size=(8, 8))
        q_t2v = rng.normal(size=(8, 8))
        item_ids = rng.integers(0, 3, size=8)
        start = int(rng.integers(8))
        fast = group_subqueue(q_v2t, q_t2v, item_ids, config, rng, start_index=start)
        assert fast == brute_force_group(q_v2t, q_t2v, item_ids, config, start)
        assert sorted(fast) == list(range(8))


def test_efn_defers_same_item_candidates() -> None:
    sim = np.array(
        [
            [0.0, 0.99, 0.2, 0.1],
            [0.99, 0.0, 0.3, 0.2],
            [0.2, 0.3, 0.0, 0.95],
            [0.1, 0.2, 0.95, 0.0],
        ]
    )
    items = np.array([0, 0, 1, 1])
    config = _grouping(strategy="hardest", efn=True, collect_queue_size=4, subqueue_size=4)
    order = group_subqueue(sim, sim, items, config, make_rng(0, "tests"), start_index=0)
    assert order[1] == 2
    assert items[order[0]] != items[order[1]]


def test_random_strategy_is_a_permutation() -> None:
    config = _grouping(strategy="random", efn=False)
    order = group_subqueue(np.zeros((8, 8)), np.zeros((8, 8)), np.arange(8), config, make_rng(3, "tests"))
    assert sorted(order) == list(range(8))


def test_group_subqueue_rejects_bad_inputs() -> None:
    config = _grouping()
    with pytest.raises(ValueError, match="at least two"):
        group_subqueue(np.zeros((1, 1)), np.zeros((1, 1)), np.arange(1), config, make_rng(0, "tests"))
    with pytest.raises(ShapeError):
        group_subqueue(np.zeros((3, 3)), np.zeros((3, 2)), np.arange(3), config, make_rng(0, "tests"))
    with pytest.raises(ValueError, match="finite"):
        bad = np.zeros((2, 2))
        bad[0, 1] = np.inf
        group_subqueue(bad, bad, np.arange(2), config, make_rng(0, "tests"))


def test_plan_partitions_the_epoch(queue: SampleQueue) -> None:
    config = _grouping(collect_queue_size=16, subqueue_size=8, batch_size=4)
    plan = plan_epoch(queue, config, make_rng(0, "epoch"))
    assert len(plan.batches) == 8
    assert all(batch.example_indices.size == 4 for batch in plan.batches)
    assert sorted(plan.example_order().tolist()) == list(range(32))
    for batch in plan.batches:
        assert np.array_equal(batch.item_ids, queue.item_ids[batch.example_indices])


def test_plan_is_deterministic(queue: SampleQueue) -> None:
    config = _grouping()
    a = plan_epoch(queue, config, make_rng(4, "epoch", 0))
    b = plan_epoch(queue, config, make_rng(4, "epoch", 0))
    c = plan_epoch(queue, config, make_rng(4, "epoch", 1))
    assert np.array_equal(a.example_order(), b.example_order())
    assert not np.array_equal(a.example_order(), c.example_order())


def test_plan_rejects_ragged_queue(queue: SampleQueue) -> None:
    config = _grouping(collect_queue_size=12, subqueue_size=6, batch_size=2)
    with pytest.raises(ValueError, match="not a multiple"):
        plan_epoch(
            SampleQueue(
                queue.example_index[:28],
                queue.item_ids[:28],
                queue.text_vecs[:28],
                queue.image_vecs[:28],
            ),
            config,
            make_rng(0, "epoch"),
        )


def test_efn_lowers_same_item_batch_mates(queue: SampleQueue) -> None:
    with_efn = _grouping(strategy="hardest", efn=True)
    without_efn = _grouping(strategy="hardest", efn=False)
    rate_with = np.mean(
        [same_item_rate(plan_epoch(queue, with_efn, make_rng(s, "epoch"))) for s in range(10)]
    )
    rate_without = np.mean(
        [same_item_rate(plan_epoch(queue, without_efn, make_rng(s, "epoch"))) for s in range(10)]
    )
    assert rate_with < rate_without


def test_sample_queue_rejects_duplicates() -> None:
    with pytest.raises(ValueError, match="one record per example"):
        SampleQueue(np.array([0, 0]), np.array([1, 2]), np.eye(2), np.eye(2))


def test_plan_dump_lists_example_and_item(queue: SampleQueue, tmp_path: Path) -> None:
    config = _grouping()
    plan = plan_epoch(queue, config, make_rng(0, "epoch"))
    path = tmp_path / "plans" / "epoch_000.txt"
    plan.dump(path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(plan.batches)
    first = plan.batches[0]
    assert lines[0] == " ".join(f"{e}:{i}" for e, i in zip(first.example_indices, first.item_ids))


@pytest.fixture(scope="module")
def corpus_queue() -> SampleQueue:
    """Teacher features of the default synthetic corpus, four views per item."""
    model_config = ModelConfig()
    corpus = training_corpus(CorpusConfig(), model_config)
    model = DualModel.initialize(model_config, make_rng(0, "init"))
    return collect_features(model, corpus)


def test_efn_never_picks_same_item_while_alternatives_remain(corpus_queue: SampleQueue) -> None:
    config = _grouping(strategy="hardest", efn=True)
    assert np.all(np.bincount(corpus_queue.item_ids) == 4)
    n_items = int(corpus_queue.item_ids.max()) + 1
    for seed in range(1000):
        rng = make_rng(seed, "tests", "efn")
        picked = rng.choice(n_items, size=4, replace=False)
        members = np.concatenate(
            [
                rng.choice(np.flatnonzero(corpus_queue.item_ids == item), size=2, replace=False)
                for item in picked
            ]
        )
        items = corpus_queue.item_ids[members]
        q_v2t = corpus_queue.image_vecs[members] @ corpus_queue.text_vecs[members].T
        order = group_subqueue(q_v2t, q_v2t.T.copy(), items, config, rng)
        for step in range(1, len(order)):
            anchor_item = items[order[step - 1]]
            remaining = items[order[step:]]
            if np.any(remaining != anchor_item):
                assert items[order[step]] != anchor_item
