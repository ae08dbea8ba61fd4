"""Cross-modal retrieval, mask dumps and mask-visibility measurements."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.config import MaskConfig, MaskingStrategy
from src.datagen import Corpus
from src.model import CrossAttentionRecord, DualModel, cls_rows
from src.rng import make_rng
from src.syncmask import MaskPlan, plan_masks
from src.utils import write_pgm

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 64


@dataclass(frozen=True)
class RetrievalReport:
    """Recall percentages keyed by cut-off, per direction."""

    i2t: dict[int, float]
    t2i: dict[int, float]

    @property
    def r_mean(self) -> float:
        values = list(self.i2t.values()) + list(self.t2i.values())
        return float(np.mean(values))

    def as_record(self) -> dict[str, float]:
        record = {f"i2t_r{k}": v for k, v in self.i2t.items()}
        record.update({f"t2i_r{k}": v for k, v in self.t2i.items()})
        record["r_mean"] = self.r_mean
        return record


def project_corpus(
    model: DualModel,
    corpus: Corpus,
    use_teacher: bool = False,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit ITC projections of every image and caption, in corpus order."""
    image_vecs: list[np.ndarray] = []
    text_vecs: list[np.ndarray] = []
    for start in range(0, len(corpus), chunk):
        rows = np.arange(start, min(start + chunk, len(corpus)))
        img = model.encode_image(corpus.patches(rows), use_teacher=use_teacher)
        txt = model.encode_text(corpus.tokens(rows), use_teacher=use_teacher)
        image_vecs.append(model.itc_project(cls_rows(img), "visual", use_teacher).numpy())
        text_vecs.append(model.itc_project(cls_rows(txt), "textual", use_teacher).numpy())
    return np.concatenate(image_vecs), np.concatenate(text_vecs)


def match_ranks(sim: np.ndarray) -> np.ndarray:
    """
    Zero-based rank of the diagonal entry within each row.

    Candidates scoring equal to the true match rank ahead of it only when
    their index is lower.
    """
    m = sim.shape[0]
    true = np.diag(sim)[:, None]
    lower = np.arange(m)[None, :] < np.arange(m)[:, None]
    return ((sim > true) | ((sim == true) & lower)).sum(axis=1)


def recall_at_k(sim: np.ndarray, ks: tuple[int, ...] | list[int]) -> dict[int, float]:
    """Percentage of query rows whose true match (the diagonal) ranks within the top K."""
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"retrieval needs a square similarity matrix, got {sim.shape}")
    ranks = match_ranks(sim)
    return {int(k): 100.0 * float(np.mean(ranks < k)) for k in ks}


def evaluate_retrieval(
    model: DualModel, corpus: Corpus, ks: tuple[int, ...] | list[int] = (1, 5, 10)
) -> RetrievalReport:
    """
    Image-to-text and text-to-image recall of the student's ITC projections.

    Args:
        model: trained model; only student parameters are used
        corpus: one view per item
        ks: recall cut-offs

    Returns:
        Recall in percent for each cut-off and direction
    """
    item_ids = corpus.item_ids
    if len(set(item_ids.tolist())) != item_ids.size:
        raise ValueError("retrieval pairs must be distinct items (one view each)")
    if item_ids.size < max(ks):
        raise ValueError(f"{item_ids.size} pairs cannot support R@{max(ks)}")
    image_vecs, text_vecs = project_corpus(model, corpus)
    sim = image_vecs @ text_vecs.T
    report = RetrievalReport(i2t=recall_at_k(sim, ks), t2i=recall_at_k(sim.T, ks))
    logger.info(
        "Retrieval "
        + " ".join(f"{name}={value:.2f}" for name, value in report.as_record().items())
    )
    return report


def teacher_records(
    model: DualModel, corpus: Corpus, chunk: int = DEFAULT_CHUNK
) -> list[CrossAttentionRecord]:
    """Per-pair teacher cross-attention on the unmasked pairs."""
    records: list[CrossAttentionRecord] = []
    for start in range(0, len(corpus), chunk):
        rows = np.arange(start, min(start + chunk, len(corpus)))
        text = model.encode_text(corpus.tokens(rows), use_teacher=True)
        image = model.encode_image(corpus.patches(rows), use_teacher=True)
        _, record = model.fuse(text, image, use_teacher=True, provenance="teacher:full")
        records += [record.pair(b, provenance=f"teacher:pair{int(r)}") for b, r in enumerate(rows)]
    return records


def plan_corpus_masks(
    model: DualModel,
    corpus: Corpus,
    mask_config: MaskConfig,
    strategy: MaskingStrategy,
    seed: int,
) -> list[MaskPlan]:
    return [
        plan_masks(record, mask_config, make_rng(seed, "masks", i), strategy.text, strategy.image)
        for i, record in enumerate(teacher_records(model, corpus))
    ]


def visible_mask_fraction(m_text: np.ndarray, visibility: np.ndarray) -> float:
    """Fraction of masked caption positions that name an attribute visible in the image."""
    masked = np.asarray(m_text) == 1
    total = int(masked.sum())
    if total == 0:
        return 0.0
    return float((masked & np.asarray(visibility, dtype=bool)).sum() / total)


def mean_visible_mask_fraction(
    model: DualModel,
    corpus: Corpus,
    mask_config: MaskConfig,
    strategy: MaskingStrategy,
    seed: int,
) -> float:
    """Per-pair mask-on-visible-token fraction, averaged over the corpus."""
    plans = plan_corpus_masks(model, corpus, mask_config, strategy, seed)
    visibility = corpus.visibility()
    fractions = [visible_mask_fraction(p.m_text, visibility[i]) for i, p in enumerate(plans)]
    return float(np.mean(fractions))


def dump_masks(
    model: DualModel,
    corpus: Corpus,
    path: Path,
    mask_config: MaskConfig,
    strategy: MaskingStrategy = MaskingStrategy(),
    seed: int = 0,
    heatmaps: bool = True,
) -> Path:
    """
    Write one JSON record per pair plus a P×P graymap of its image attention.

    Returns:
        The JSONL file written
    """
    plans = plan_corpus_masks(model, corpus, mask_config, strategy, seed)
    visibility = corpus.visibility()
    grid_size = model.config.grid_size
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for i, plan in enumerate(plans):
                assert plan.summary is not None
                record = {
                    "pair": i,
                    "item_id": int(corpus.item_ids[i]),
                    "o_text": [float(x) for x in plan.summary.o_text],
                    "o_image": [float(x) for x in plan.summary.o_image],
                    "idx_text": plan.idx_text,
                    "idx_image": plan.idx_image,
                    "visibility": [bool(v) for v in visibility[i]],
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")
                if heatmaps:
                    write_pgm(
                        path.parent / f"{path.stem}_heatmaps" / f"pair_{i:04d}.pgm",
                        plan.summary.image_grid(grid_size),
                    )
    except OSError as e:
        logger.error(f"Could not write mask dump to {path}: {e}")
        raise
    logger.info(f"Dumped masks of {len(plans)} pairs to {path}")
    return path

