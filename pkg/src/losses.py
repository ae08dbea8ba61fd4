"""Pretraining objectives: MLM, distillation MIM, queue-based ITC, ITM, and their sum."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from src.errors import NonFiniteLossError, ShapeError
from src.numerics import (
    Tensor,
    add,
    concat,
    constant,
    index,
    log_softmax_rows,
    matmul,
    mean_all,
    mul,
    reciprocal,
    scale,
    smooth_l1 as smooth_l1_elementwise,
    sum_all,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBundle:
    l_mlm: Tensor
    l_mim: Tensor
    l_itc: Tensor
    l_itm: Tensor
    l_total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "l_mlm": self.l_mlm.item(),
            "l_mim": self.l_mim.item(),
            "l_itc": self.l_itc.item(),
            "l_itm": self.l_itm.item(),
            "l_total": self.l_total.item(),
        }


@dataclass(frozen=True)
class HardNegatives:
    neg_image_for_text: np.ndarray
    neg_text_for_image: np.ndarray


def smooth_l1(a: float, b: float, gamma: float = 1.0) -> float:
    return smooth_l1_elementwise(Tensor(a), Tensor(b), gamma).item()


def mim_dist(
    teacher_feats: Tensor | np.ndarray,
    student_feats: Tensor,
    m_image: np.ndarray,
    gamma: float = 1.0,
) -> Tensor:
    """
    Smooth-L1 distillation on masked patches, normalised by the mask count.

    Per masked patch the loss is averaged over the feature width; the [CLS]
    row is skipped. Batched inputs give the mean over pairs. The teacher side
    is always a constant.
    """
    target = constant(
        teacher_feats.data if isinstance(teacher_feats, Tensor) else teacher_feats
    )
    if target.shape != student_feats.shape:
        raise ShapeError("mim_dist", target.shape, student_feats.shape)
    m = np.asarray(m_image, dtype=np.float64)
    single = m.ndim == 1
    if single:
        m = m[None]
    omega = m.sum(axis=1)
    if np.any(omega == 0):
        raise ValueError("mim_dist needs at least one masked patch per pair")
    width = student_feats.shape[-1]
    if m.shape[1] + 1 != student_feats.shape[-2]:
        raise ShapeError("mim_dist", student_feats.shape, m.shape)

    weights = np.zeros((m.shape[0], m.shape[1] + 1, width))
    weights[:, 1:, :] = (m / (omega[:, None] * width * m.shape[0]))[:, :, None]
    if single:
        weights = weights[0]
    per_element = smooth_l1_elementwise(student_feats, target, gamma)
    return sum_all(mul(per_element, constant(weights)))


def mlm_loss(logits: Tensor, target_ids: np.ndarray, m_text: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked caption positions (all pairs pooled)."""
    targets = np.asarray(target_ids)
    m = np.asarray(m_text)
    if targets.shape != m.shape or logits.shape[:-1] != m.shape:
        raise ShapeError("mlm_loss", logits.shape, targets.shape, m.shape)
    positions = np.nonzero(m == 1)
    if positions[0].size == 0:
        raise ValueError("mlm_loss needs at least one masked position")
    log_probs = log_softmax_rows(logits)
    picked = index(log_probs, (*positions, targets[positions]))
    return scale(mean_all(picked), -1.0)


def _soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    rows = logits.shape[0]
    return scale(sum_all(mul(log_softmax_rows(logits), constant(targets))), -1.0 / rows)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def itc_loss(
    batch_v: Tensor,
    batch_t: Tensor,
    queue_v: np.ndarray,
    queue_t: np.ndarray,
    positives: np.ndarray,
    tau: Tensor | float,
    soft_label_alpha: float = 0.0,
    teacher_v: np.ndarray | None = None,
    teacher_t: np.ndarray | None = None,
) -> Tensor:
    """
    Contrastive loss of student projections against the teacher queues.

    Args:
        batch_v: (B, p) student image vectors
        batch_t: (B, p) student text vectors
        queue_v: (U, p) teacher image queue, already holding this batch
        queue_t: (U, p) teacher text queue, already holding this batch
        positives: queue slot of each batch element's own pair
        tau: temperature
        soft_label_alpha: weight of the teacher's similarity distribution in
            the targets; 0 keeps strictly one-hot targets
        teacher_v, teacher_t: teacher vectors of the batch (needed when
            soft_label_alpha > 0)

    Returns:
        0.5·(mean CE image-to-text + mean CE text-to-image)
    """
    u = queue_v.shape[0]
    pos = np.asarray(positives, dtype=np.int64)
    if queue_t.shape != queue_v.shape or batch_v.shape != batch_t.shape:
        raise ShapeError("itc_loss", batch_v.shape, batch_t.shape, queue_v.shape, queue_t.shape)
    if pos.shape != (batch_v.shape[0],):
        raise ShapeError("itc_loss positives", pos.shape, (batch_v.shape[0],))
    if pos.size and (pos.min() < 0 or pos.max() >= u):
        raise ValueError(f"positive slots {pos.tolist()} out of range for queue size {u}")

    inv_tau = reciprocal(tau) if isinstance(tau, Tensor) else constant(1.0 / tau)
    logits_v2t = mul(matmul(batch_v, transpose(constant(queue_t))), inv_tau)
    logits_t2v = mul(matmul(batch_t, transpose(constant(queue_v))), inv_tau)

    one_hot = np.zeros((pos.size, u))
    one_hot[np.arange(pos.size), pos] = 1.0
    targets_v2t = targets_t2v = one_hot
    if soft_label_alpha > 0.0:
        if teacher_v is None or teacher_t is None:
            raise ValueError("soft ITC targets need the teacher batch vectors")
        tau_value = tau.item() if isinstance(tau, Tensor) else tau
        targets_v2t = (
            soft_label_alpha * _softmax_np(teacher_v @ queue_t.T / tau_value)
            + (1.0 - soft_label_alpha) * one_hot
        )
        targets_t2v = (
            soft_label_alpha * _softmax_np(teacher_t @ queue_v.T / tau_value)
            + (1.0 - soft_label_alpha) * one_hot
        )

    ce_v2t = _soft_cross_entropy(logits_v2t, targets_v2t)
    ce_t2v = _soft_cross_entropy(logits_t2v, targets_t2v)
    return scale(add(ce_v2t, ce_t2v), 0.5)


def mine_hard_negatives(
    sim_v2t: np.ndarray,
    sim_t2v: np.ndarray,
    item_ids: np.ndarray,
    rng: np.random.Generator,
) -> HardNegatives:
    """
    Draw one in-batch negative per anchor in each direction.

    Probabilities follow the softmax of the anchor's similarity row, with the
    anchor's own column and every column sharing its item id set to zero.
    """
    items = np.asarray(item_ids)
    b = items.shape[0]
    if b < 2 or sim_v2t.shape != (b, b) or sim_t2v.shape != (b, b):
        raise ShapeError("mine_hard_negatives", sim_v2t.shape, sim_t2v.shape, items.shape)
    eligible = items[:, None] != items[None, :]

    def draw(sim: np.ndarray) -> np.ndarray:
        picks = np.empty(b, dtype=np.int64)
        for anchor in range(b):
            if not eligible[anchor].any():
                raise ValueError(
                    f"anchor {anchor} (item {items[anchor]}) has no different-item candidate"
                )
            row = np.where(eligible[anchor], sim[anchor], -np.inf)
            probs = _softmax_np(row)
            picks[anchor] = rng.choice(b, p=probs)
        return picks

    neg_image_for_text = draw(sim_t2v)
    neg_text_for_image = draw(sim_v2t)
    return HardNegatives(neg_image_for_text, neg_text_for_image)


def itm_loss(pos_logits: Tensor, neg_logits: Tensor) -> Tensor:
    """Mean two-class cross-entropy: label 1 for positives, 0 for mined negatives."""
    if pos_logits.ndim != 2 or pos_logits.shape[1] != 2 or neg_logits.shape[1:] != (2,):
        raise ShapeError("itm_loss", pos_logits.shape, neg_logits.shape)
    n_pos, n_neg = pos_logits.shape[0], neg_logits.shape[0]
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(n_neg, dtype=np.int64)])
    log_probs = log_softmax_rows(concat([pos_logits, neg_logits], axis=0))
    picked = index(log_probs, (np.arange(n_pos + n_neg), labels))
    return scale(mean_all(picked), -1.0)


def total_loss(l_mlm: Tensor, l_mim: Tensor, l_itc: Tensor, l_itm: Tensor) -> LossBundle:
    """Unweighted sum, accumulated as MIM + MLM + ITC + ITM."""
    for term, value in (("l_mlm", l_mlm), ("l_mim", l_mim), ("l_itc", l_itc), ("l_itm", l_itm)):
        number = value.item()
        if not math.isfinite(number):
            raise NonFiniteLossError(term, number)
    total = add(add(add(l_mim, l_mlm), l_itc), l_itm)
    return LossBundle(l_mlm=l_mlm, l_mim=l_mim, l_itc=l_itc, l_itm=l_itm, l_total=total)
