"""
Synchronized attentional masking.

The teacher's last-layer cross-attention, read in both directions, scores every
caption token and every image patch. Each modality then masks a random subset
of its highest-scoring positions, so both masks come from the same forward
pass on the same image-text pair.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from src.config import MaskConfig, ModelConfig
from src.errors import ShapeError
from src.model import CrossAttentionRecord, ParameterSet, encode_image
from src.numerics import Tensor

logger = logging.getLogger(__name__)

Strategy = Literal["random", "attentional"]


@dataclass(frozen=True)
class AttentionSummary:
    o_text: np.ndarray
    o_image: np.ndarray

    def image_grid(self, grid_size: int) -> np.ndarray:
        return self.o_image.reshape(grid_size, grid_size)


@dataclass(frozen=True)
class MaskPlan:
    m_text: np.ndarray
    m_image: np.ndarray
    idx_text: list[int]
    idx_image: list[int]
    provenance: str = ""
    summary: AttentionSummary | None = field(default=None, compare=False)


@dataclass(frozen=True)
class MaskedImageRequest:
    """Patches paired with the image mask that will replace their embeddings."""

    patches: np.ndarray
    m_image: np.ndarray

    @property
    def omega(self) -> int:
        return int(self.m_image.sum())

    def encode(self, params: ParameterSet, config: ModelConfig) -> Tensor:
        return encode_image(self.patches, params, config, mask=self.m_image)


def summarize_attention(record: CrossAttentionRecord) -> AttentionSummary:
    """
    Average each direction over heads and non-[CLS] query rows.

    o_text[j] reads the image-query map at text column j+1 and o_image[k]
    reads the text-query map at image column k+1.
    """
    if record.batched:
        raise ShapeError("summarize_attention", record.a_t2i.shape)
    o_text = record.a_i2t[:, 1:, 1:].mean(axis=(0, 1))
    o_image = record.a_t2i[:, 1:, 1:].mean(axis=(0, 1))
    return AttentionSummary(o_text=o_text, o_image=o_image)


def select_mask_indices(
    weights: np.ndarray, k: int, pool: int, rng: np.random.Generator
) -> list[int]:
    """
    Shuffle the ``pool`` largest weights and keep the first ``k``.

    Ties in the descending sort go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    if not 0 <= k <= pool <= n:
        raise ValueError(f"mask selection needs 0 <= K <= L <= n, got K={k}, L={pool}, n={n}")
    if not np.all(np.isfinite(w)):
        raise ValueError("mask selection weights must be finite")
    order = np.lexsort((np.arange(n), -w))
    top = rng.permutation(order[:pool])
    return [int(i) for i in top[:k]]


def random_mask_indices(n: int, k: int, rng: np.random.Generator) -> list[int]:
    if not 0 <= k <= n:
        raise ValueError(f"cannot mask {k} of {n} positions")
    return [int(i) for i in rng.choice(n, size=k, replace=False)]


def build_mask(idx: list[int], n: int) -> np.ndarray:
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate mask indices in {idx}")
    if any(i < 0 or i >= n for i in idx):
        raise ValueError(f"mask indices {idx} out of range for length {n}")
    mask = np.zeros(n, dtype=np.int64)
    mask[list(idx)] = 1
    return mask


def apply_text_mask(
    tokens: np.ndarray, m_text: np.ndarray, mask_token_id: int
) -> np.ndarray:
    """Replace masked caption positions (no [CLS]) with the mask token."""
    ids = np.asarray(tokens)
    m = np.asarray(m_text)
    if ids.shape != m.shape:
        raise ShapeError("apply_text_mask", ids.shape, m.shape)
    return np.where(m == 1, mask_token_id, ids)


def apply_image_mask(patches: np.ndarray, m_image: np.ndarray) -> MaskedImageRequest:
    p = np.asarray(patches, dtype=np.float64)
    m = np.asarray(m_image)
    if p.shape[:-1] != m.shape:
        raise ShapeError("apply_image_mask", p.shape, m.shape)
    return MaskedImageRequest(p, m)


def plan_masks(
    record: CrossAttentionRecord,
    mask_config: MaskConfig,
    rng: np.random.Generator,
    text_strategy: Strategy = "attentional",
    image_strategy: Strategy = "attentional",
) -> MaskPlan:
    """Derive both modality masks for one pair from one teacher attention record."""
    summary = summarize_attention(record)
    n_text, n_image = summary.o_text.shape[0], summary.o_image.shape[0]
    k_text, l_text = mask_config.text_counts(n_text)
    k_image, l_image = mask_config.image_counts(n_image)

    if text_strategy == "attentional":
        idx_text = select_mask_indices(summary.o_text, k_text, l_text, rng)
    else:
        idx_text = random_mask_indices(n_text, k_text, rng)
    if image_strategy == "attentional":
        idx_image = select_mask_indices(summary.o_image, k_image, l_image, rng)
    else:
        idx_image = random_mask_indices(n_image, k_image, rng)

    return MaskPlan(
        m_text=build_mask(idx_text, n_text),
        m_image=build_mask(idx_image, n_image),
        idx_text=idx_text,
        idx_image=idx_image,
        provenance=record.provenance,
        summary=summary,
    )
