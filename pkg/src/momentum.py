import logging
from dataclasses import dataclass

import numpy as np

from src.errors import ShapeError
from src.model import ParameterSet

logger = logging.getLogger(__name__)


def ema_update(teacher: ParameterSet, student: ParameterSet, beta: float) -> None:
    """
    Move every teacher tensor towards the student: θ′ ← β·θ′ + (1−β)·θ.

    The teacher is updated in place and stays untracked.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"EMA beta must lie in [0, 1], got {beta}")
    if teacher.names() != student.names() or teacher.shapes() != student.shapes():
        raise ShapeError("ema_update", (len(teacher),), (len(student),))
    for t, s in zip(teacher, student):
        t.assign(beta * t.data + (1.0 - beta) * s.data)
        t.requires_grad = False


@dataclass
class FeatureQueue:
    """
    Ring buffer of unit vectors with a parallel ring of item ids.

    Example:

        >>> queue = FeatureQueue.empty(size=3, dim=2)
        >>> queue.enqueue(np.eye(2), np.array([7, 8])).tolist()
        [0, 1]
        >>> queue.count, queue.cursor
        (2, 2)
    """

    vectors: np.ndarray
    item_ids: np.ndarray
    cursor: int = 0
    count: int = 0

    @classmethod
    def empty(cls, size: int, dim: int) -> "FeatureQueue":
        if size < 1:
            raise ValueError(f"queue size must be positive, got {size}")
        return cls(np.zeros((size, dim)), np.full(size, -1, dtype=np.int64))

    @classmethod
    def random(cls, size: int, dim: int, rng: np.random.Generator) -> "FeatureQueue":
        """A full queue of seeded random unit vectors (item id −1)."""
        queue = cls.empty(size, dim)
        draws = rng.normal(size=(size, dim))
        queue.vectors = draws / np.linalg.norm(draws, axis=1, keepdims=True)
        queue.count = size
        return queue

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def copy(self) -> "FeatureQueue":
        return FeatureQueue(self.vectors.copy(), self.item_ids.copy(), self.cursor, self.count)

    def enqueue(self, vectors: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
        """
        Overwrite the oldest slots with ``vectors``.

        Returns:
            Slot index of each enqueued vector
        """
        batch = vectors.shape[0]
        if batch > self.size:
            raise ValueError(f"cannot enqueue {batch} vectors into a queue of size {self.size}")
        if vectors.shape[1:] != self.vectors.shape[1:] or item_ids.shape != (batch,):
            raise ShapeError("enqueue", vectors.shape, item_ids.shape, self.vectors.shape)
        norms = np.linalg.norm(vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("queued features must be unit vectors")
        slots = (self.cursor + np.arange(batch)) % self.size
        self.vectors[slots] = vectors
        self.item_ids[slots] = item_ids
        self.cursor = int((self.cursor + batch) % self.size)
        self.count = min(self.count + batch, self.size)
        return slots

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored vectors and item ids, oldest first."""
        if self.count < self.size:
            return self.vectors[: self.count].copy(), self.item_ids[: self.count].copy()
        order = (self.cursor + np.arange(self.size)) % self.size
        return self.vectors[order], self.item_ids[order]
