"""
Grouped mini-batch sampling.

An epoch plan is built in four phases: collect teacher features for every
example, shuffle the examples, group each sub-queue so that similar pairs
land next to each other, then shuffle the resulting mini-batches. Grouping
walks the sub-queue alternating between the image-to-text and text-to-image
similarity of the last picked pair and takes the s-th most similar remaining
candidate. With ``efn`` set, candidates sharing the anchor's item id rank
below every other candidate.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.config import GroupingConfig
from src.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleQueue:
    """Teacher-projected features collected for each example."""

    example_index: np.ndarray
    item_ids: np.ndarray
    text_vecs: np.ndarray
    image_vecs: np.ndarray

    def __post_init__(self):
        n = self.example_index.shape[0]
        if (
            self.item_ids.shape != (n,)
            or self.text_vecs.shape[0] != n
            or self.image_vecs.shape != self.text_vecs.shape
        ):
            raise ShapeError(
                "SampleQueue",
                self.example_index.shape,
                self.item_ids.shape,
                self.text_vecs.shape,
                self.image_vecs.shape,
            )
        if len(set(self.example_index.tolist())) != n:
            raise ValueError("SampleQueue holds one record per example")

    def __len__(self) -> int:
        return self.example_index.shape[0]


@dataclass(frozen=True)
class Batch:
    example_indices: np.ndarray
    item_ids: np.ndarray


@dataclass(frozen=True)
class EpochPlan:
    batches: list[Batch]

    def example_order(self) -> np.ndarray:
        return np.concatenate([b.example_indices for b in self.batches])

    def dump(self, path: Path) -> None:
        """One line per batch: ``example:item`` pairs separated by spaces."""
        lines = [
            " ".join(f"{e}:{i}" for e, i in zip(b.example_indices, b.item_ids))
            for b in self.batches
        ]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


def _check_subqueue(q_v2t: np.ndarray, q_t2v: np.ndarray, item_ids: np.ndarray) -> int:
    size = item_ids.shape[0]
    if size < 2:
        raise ValueError(f"a sub-queue needs at least two examples, got {size}")
    if q_v2t.shape != (size, size) or q_t2v.shape != (size, size):
        raise ShapeError("group_subqueue", q_v2t.shape, q_t2v.shape, item_ids.shape)
    if not (np.all(np.isfinite(q_v2t)) and np.all(np.isfinite(q_t2v))):
        raise ValueError("sub-queue similarities must be finite")
    return size


def group_subqueue(
    q_v2t: np.ndarray,
    q_t2v: np.ndarray,
    item_ids: np.ndarray,
    config: GroupingConfig,
    rng: np.random.Generator,
    start_index: int | None = None,
) -> list[int]:
    """
    Order one sub-queue so consecutive pairs are (semi-)hard negatives.

    Args:
        q_v2t: (S, S) image-to-text similarities, row = anchor image
        q_t2v: (S, S) text-to-image similarities, row = anchor text
        item_ids: item of each example in the sub-queue
        config: strategy, rank ``s`` and false-negative exclusion
        rng: draws the start index (or the whole order for ``random``)
        start_index: fixed start instead of a random one

    Returns:
        A permutation of ``range(S)``
    """
    size = _check_subqueue(q_v2t, q_t2v, item_ids)
    if config.strategy == "random":
        return [int(i) for i in rng.permutation(size)]

    rank = config.rank
    start = int(rng.integers(size)) if start_index is None else start_index
    order = [start]
    available = np.ones(size, dtype=bool)
    available[start] = False
    positions = np.arange(size)
    use_v2t = True
    while len(order) < size:
        anchor = order[-1]
        sims = (q_v2t if use_v2t else q_t2v)[anchor]
        candidates = positions[available]
        if config.efn:
            same_item = (item_ids[candidates] == item_ids[anchor]).astype(np.int64)
            ranking = np.lexsort((candidates, -sims[candidates], same_item))
        else:
            ranking = np.lexsort((candidates, -sims[candidates]))
        picked = int(candidates[ranking[min(rank, candidates.size) - 1]])
        order.append(picked)
        available[picked] = False
        use_v2t = not use_v2t
    return order


def brute_force_group(
    q_v2t: np.ndarray,
    q_t2v: np.ndarray,
    item_ids: np.ndarray,
    config: GroupingConfig,
    start_index: int,
) -> list[int]:
    """Straight re-derivation of ``group_subqueue`` with a full sort per step."""
    size = _check_subqueue(q_v2t, q_t2v, item_ids)
    if size > 16:
        raise ValueError(f"brute-force grouping is limited to 16 examples, got {size}")
    rank = 1 if config.strategy == "hardest" else config.s
    items = [int(i) for i in item_ids]
    order = [start_index]
    for step in range(1, size):
        anchor = order[-1]
        row = q_v2t[anchor] if step % 2 == 1 else q_t2v[anchor]
        remaining = [k for k in range(size) if k not in order]

        def key(k: int) -> tuple[int, float, int]:
            penalty = 1 if config.efn and items[k] == items[anchor] else 0
            return (penalty, -float(row[k]), k)

        ranked = sorted(remaining, key=key)
        order.append(ranked[min(rank, len(ranked)) - 1])
    return order


def plan_epoch(
    queue: SampleQueue, config: GroupingConfig, rng: np.random.Generator
) -> EpochPlan:
    """
    Turn collected features into an ordered list of mini-batches.

    The shuffled examples are cut into collection chunks of
    ``collect_queue_size``, each chunk into sub-queues of ``subqueue_size``;
    every sub-queue is grouped, cut into batches, and the batches of the whole
    epoch are shuffled.
    """
    total = len(queue)
    if total % config.subqueue_size:
        raise ValueError(
            f"queue of {total} examples is not a multiple of subqueue_size {config.subqueue_size}"
        )
    shuffled = rng.permutation(total)

    batches: list[Batch] = []
    for chunk_start in range(0, total, config.collect_queue_size):
        chunk = shuffled[chunk_start : chunk_start + config.collect_queue_size]
        for sub_start in range(0, chunk.size, config.subqueue_size):
            members = chunk[sub_start : sub_start + config.subqueue_size]
            image_vecs = queue.image_vecs[members]
            text_vecs = queue.text_vecs[members]
            q_v2t = image_vecs @ text_vecs.T
            grouped = members[
                group_subqueue(q_v2t, q_v2t.T.copy(), queue.item_ids[members], config, rng)
            ]
            for b in range(0, grouped.size, config.batch_size):
                rows = grouped[b : b + config.batch_size]
                batches.append(Batch(queue.example_index[rows], queue.item_ids[rows]))

    order = rng.permutation(len(batches))
    plan = EpochPlan([batches[i] for i in order])
    logger.info(
        f"Planned {len(plan.batches)} batches of {config.batch_size} "
        f"({config.strategy}, s={config.rank}, efn={config.efn})"
    )
    return plan


def same_item_rate(plan: EpochPlan) -> float:
    """Fraction of batch-mate pairs that share an item id."""
    shared = pairs = 0
    for batch in plan.batches:
        ids = batch.item_ids
        n = ids.size
        same = (ids[:, None] == ids[None, :]).sum() - n
        shared += int(same)
        pairs += n * (n - 1)
    return shared / pairs if pairs else 0.0
