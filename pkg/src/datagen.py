"""
Synthetic fashion-like corpus: items seen from several partial views.

Every item has one attribute value per slot. A view shows a subset of the
slots; each visible slot paints its value's pattern into the slot's region of
the patch grid. All views of an item share one caption that names every
attribute, visible or not, so some caption tokens have nothing to ground them
in a given image. By default captions name the attributes in slot order and
share one filler tail.
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.config import (
    CLS_TOKEN_ID,
    FIRST_ATTRIBUTE_TOKEN_ID,
    CorpusConfig,
    ModelConfig,
)
from src.errors import ShapeError
from src.rng import make_rng

logger = logging.getLogger(__name__)

CORPUS_MAGIC = "syncmask-corpus/1"


@dataclass(frozen=True)
class ItemSpec:
    item_id: int
    attributes: tuple[int, ...]


@dataclass(frozen=True)
class View:
    item_id: int
    visible: tuple[bool, ...]
    patches: np.ndarray
    caption_tokens: np.ndarray
    attribute_positions: tuple[int, ...]


@dataclass(frozen=True)
class Vocabulary:
    n_slots: int
    n_values: int
    vocab_size: int
    mask_token_id: int

    def attribute_token(self, slot: int, value: int) -> int:
        return FIRST_ATTRIBUTE_TOKEN_ID + slot * self.n_values + value

    def filler_tokens(self) -> list[int]:
        first = FIRST_ATTRIBUTE_TOKEN_ID + self.n_slots * self.n_values
        return [t for t in range(first, self.vocab_size) if t != self.mask_token_id]


@dataclass(frozen=True)
class Corpus:
    corpus_config: CorpusConfig
    model_config: ModelConfig
    seed: int
    items: list[ItemSpec]
    views: list[View]

    def __len__(self) -> int:
        return len(self.views)

    @property
    def item_ids(self) -> np.ndarray:
        return np.array([v.item_id for v in self.views], dtype=np.int64)

    def tokens(self, indices: np.ndarray | None = None) -> np.ndarray:
        """Caption ids with [CLS] prepended: (M, N+1)."""
        views = self._select(indices)
        captions = np.stack([v.caption_tokens for v in views])
        cls = np.full((captions.shape[0], 1), CLS_TOKEN_ID, dtype=np.int64)
        return np.concatenate([cls, captions], axis=1)

    def patches(self, indices: np.ndarray | None = None) -> np.ndarray:
        return np.stack([v.patches for v in self._select(indices)])

    def visibility(self, indices: np.ndarray | None = None) -> np.ndarray:
        return np.stack([visibility_labels(v) for v in self._select(indices)])

    def visible_token_rate(self) -> float:
        return float(self.visibility().mean())

    def _select(self, indices: np.ndarray | None) -> list[View]:
        if indices is None:
            return self.views
        return [self.views[int(i)] for i in indices]


def region_layout(n_slots: int, grid_size: int) -> list[list[int]]:
    """
    Split the patch grid into ``n_slots`` disjoint rectangular regions.

    Returns:
        Patch indices (row-major) of each slot's region
    """
    rows = math.ceil(math.sqrt(n_slots))
    cols = math.ceil(n_slots / rows)
    height, width = grid_size // rows, grid_size // cols
    if height == 0 or width == 0:
        raise ValueError(
            f"{n_slots} attribute regions do not fit a {grid_size}x{grid_size} patch grid"
        )
    regions: list[list[int]] = []
    for slot in range(n_slots):
        r0, c0 = (slot // cols) * height, (slot % cols) * width
        regions.append(
            [
                (r0 + r) * grid_size + (c0 + c)
                for r in range(height)
                for c in range(width)
            ]
        )
    return regions


def attribute_patterns(
    corpus_config: CorpusConfig, patch_dim: int
) -> np.ndarray:
    """Fixed pattern per (slot, value): (n_slots, n_values, patch_dim) in [-1, 1]."""
    rng = make_rng(corpus_config.seed, "patterns")
    return rng.uniform(
        -1.0, 1.0, size=(corpus_config.n_slots, corpus_config.n_values, patch_dim)
    )


def render_view(
    item: ItemSpec,
    visibility: tuple[bool, ...],
    corpus_config: CorpusConfig,
    model_config: ModelConfig,
    patterns: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Paint the visible attributes of ``item`` into a (N_img, patch_dim) grid.

    Hidden slots keep the zero background; uniform noise of amplitude
    ``corpus_config.noise`` is added everywhere.
    """
    if len(visibility) != len(item.attributes):
        raise ShapeError("render_view", (len(visibility),), (len(item.attributes),))
    if not any(visibility):
        raise ValueError(f"view of item {item.item_id} shows no attribute")
    regions = region_layout(len(item.attributes), model_config.grid_size)
    grid = np.zeros((model_config.num_patches, model_config.patch_dim))
    for slot, (value, shown) in enumerate(zip(item.attributes, visibility)):
        if shown:
            grid[regions[slot]] = patterns[slot, value]
    noise = corpus_config.noise
    return grid + rng.uniform(-noise, noise, size=grid.shape)


def visibility_labels(view: View) -> np.ndarray:
    """True at caption positions naming an attribute visible in this view."""
    labels = np.zeros(view.caption_tokens.shape[0], dtype=bool)
    for slot, position in enumerate(view.attribute_positions):
        labels[position] = view.visible[slot]
    return labels


def partial_visibility_patterns(n_slots: int) -> list[tuple[bool, ...]]:
    """Every non-empty proper subset of visible slots, in a fixed order."""
    return [
        bits
        for bits in itertools.product((True, False), repeat=n_slots)
        if any(bits) and not all(bits)
    ]


def _visibility_patterns(
    n_slots: int, views_per_item: int, rng: np.random.Generator
) -> list[tuple[bool, ...]]:
    full = tuple([True] * n_slots)
    if views_per_item == 1:
        return [full]
    partial = partial_visibility_patterns(n_slots)
    if views_per_item - 1 > len(partial):
        raise ValueError(
            f"{views_per_item} views need distinct visibility patterns but {n_slots} slots "
            f"allow only {len(partial) + 1}"
        )
    picks = rng.choice(len(partial), size=views_per_item - 1, replace=False)
    return [full] + [partial[int(i)] for i in picks]


def filler_template(corpus_config: CorpusConfig, vocab: Vocabulary, length: int) -> np.ndarray:
    """Filler tail shared by every caption of the corpus."""
    rng = make_rng(corpus_config.seed, "fillers")
    return rng.choice(vocab.filler_tokens(), size=length).astype(np.int64)


def compose_caption(
    attributes: tuple[int, ...],
    corpus_config: CorpusConfig,
    vocab: Vocabulary,
    text_len: int,
    template: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """
    Caption ids of one item and the position of each slot's attribute token.

    The template layout names the attributes in slot order and pads with the
    shared filler tail; the scattered layout places them at random positions
    among per-item random fillers.
    """
    n_slots = len(attributes)
    if corpus_config.caption_layout == "template":
        positions = tuple(range(n_slots))
        caption = np.concatenate([np.zeros(n_slots, dtype=np.int64), template])
    else:
        positions = tuple(int(p) for p in np.sort(rng.choice(text_len, size=n_slots, replace=False)))
        caption = rng.choice(vocab.filler_tokens(), size=text_len).astype(np.int64)
    for slot, position in enumerate(positions):
        caption[position] = vocab.attribute_token(slot, attributes[slot])
    return caption, positions


def generate_corpus(
    n_items: int,
    views_per_item: int,
    corpus_config: CorpusConfig,
    model_config: ModelConfig,
    seed: int,
    first_item_id: int = 0,
) -> Corpus:
    """
    Build ``n_items · views_per_item`` image-text pairs.

    View 0 of every item shows all slots; each further view hides a distinct
    seeded non-empty proper subset, so every attribute is visible in some view
    and no two views of an item look alike.
    """
    if n_items < 1 or views_per_item < 1:
        raise ValueError(f"need n_items >= 1 and views_per_item >= 1, got {n_items}, {views_per_item}")
    vocab = Vocabulary(
        corpus_config.n_slots,
        corpus_config.n_values,
        model_config.vocab_size,
        model_config.mask_token_id,
    )
    fillers = vocab.filler_tokens()
    needed = FIRST_ATTRIBUTE_TOKEN_ID + corpus_config.n_slots * corpus_config.n_values
    if needed > model_config.vocab_size or not fillers:
        raise ValueError(
            f"vocab_size {model_config.vocab_size} too small for "
            f"{corpus_config.n_slots}x{corpus_config.n_values} attributes and filler"
        )
    if model_config.text_len < corpus_config.n_slots:
        raise ValueError(
            f"text_len {model_config.text_len} cannot hold {corpus_config.n_slots} attributes"
        )
    patterns = attribute_patterns(corpus_config, model_config.patch_dim)
    template = filler_template(
        corpus_config, vocab, model_config.text_len - corpus_config.n_slots
    )

    items: list[ItemSpec] = []
    views: list[View] = []
    for offset in range(n_items):
        item_id = first_item_id + offset
        rng = make_rng(seed, "item", item_id)
        attributes = tuple(
            int(v) for v in rng.integers(0, corpus_config.n_values, size=corpus_config.n_slots)
        )
        item = ItemSpec(item_id, attributes)
        items.append(item)

        caption, positions = compose_caption(
            attributes, corpus_config, vocab, model_config.text_len, template, rng
        )

        for view_index, visible in enumerate(
            _visibility_patterns(corpus_config.n_slots, views_per_item, rng)
        ):
            render_rng = make_rng(seed, "render", item_id, view_index)
            patches = render_view(
                item, visible, corpus_config, model_config, patterns, render_rng
            )
            views.append(View(item_id, visible, patches, caption.copy(), positions))

    logger.info(
        f"Generated {len(views)} pairs from {n_items} items (seed {seed})"
    )
    return Corpus(corpus_config, model_config, seed, items, views)


def training_corpus(corpus_config: CorpusConfig, model_config: ModelConfig) -> Corpus:
    return generate_corpus(
        corpus_config.n_items,
        corpus_config.views_per_item,
        corpus_config,
        model_config,
        corpus_config.seed,
    )


def eval_corpus(corpus_config: CorpusConfig, model_config: ModelConfig) -> Corpus:
    """Held-out items (ids after the training items), one full view each."""
    return generate_corpus(
        corpus_config.eval_items,
        1,
        corpus_config,
        model_config,
        corpus_config.eval_seed,
        first_item_id=corpus_config.n_items,
    )


def save_corpus(corpus: Corpus, path: Path) -> None:
    """
    Write a JSON header line, then one line per pair:
    ``item_id visibility_bits caption_ids... | attribute_positions... | patch values...``.
    """
    header = {
        "format": CORPUS_MAGIC,
        "seed": corpus.seed,
        "corpus": corpus.corpus_config.model_dump(mode="json"),
        "model": corpus.model_config.model_dump(mode="json"),
        "items": [[i.item_id, list(i.attributes)] for i in corpus.items],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for view in corpus.views:
        bits = "".join("1" if v else "0" for v in view.visible)
        caption = " ".join(str(int(t)) for t in view.caption_tokens)
        positions = " ".join(str(p) for p in view.attribute_positions)
        values = " ".join(repr(float(x)) for x in view.patches.reshape(-1))
        lines.append(f"{view.item_id} {bits} {caption} | {positions} | {values}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote corpus of {len(corpus)} pairs to {path}")


def load_corpus(path: Path) -> Corpus:
    header_line, *records = path.read_text().splitlines()
    header = json.loads(header_line)
    if header.get("format") != CORPUS_MAGIC:
        raise ValueError(f"{path} is not a corpus file ({header.get('format')!r})")
    corpus_config = CorpusConfig.model_validate(header["corpus"])
    model_config = ModelConfig.model_validate(header["model"])
    items = [ItemSpec(int(i), tuple(int(a) for a in attrs)) for i, attrs in header["items"]]
    shape = (model_config.num_patches, model_config.patch_dim)
    views: list[View] = []
    for record in records:
        head, positions, values = record.split(" | ")
        item_id, bits, *caption = head.split()
        views.append(
            View(
                item_id=int(item_id),
                visible=tuple(b == "1" for b in bits),
                patches=np.array([float(x) for x in values.split()]).reshape(shape),
                caption_tokens=np.array([int(t) for t in caption], dtype=np.int64),
                attribute_positions=tuple(int(p) for p in positions.split()),
            )
        )
    return Corpus(corpus_config, model_config, int(header["seed"]), items, views)
