import logging
from pathlib import Path

import numpy as np
import pytest

from src.config import CLS_TOKEN_ID, CorpusConfig, ModelConfig
from src.datagen import (
    Corpus,
    ItemSpec,
    Vocabulary,
    attribute_patterns,
    eval_corpus,
    generate_corpus,
    load_corpus,
    logger,
    partial_visibility_patterns,
    region_layout,
    render_view,
    save_corpus,
    training_corpus,
    visibility_labels,
)
from src.errors import ShapeError
from src.rng import make_rng

logger.setLevel(logging.DEBUG)


@pytest.fixture
def corpus_config() -> CorpusConfig:
    return CorpusConfig()


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig()


@pytest.fixture
def corpus(corpus_config: CorpusConfig, model_config: ModelConfig) -> Corpus:
    return training_corpus(corpus_config, model_config)


def test_single_item_single_view(corpus_config: CorpusConfig, model_config: ModelConfig) -> None:
    corpus = generate_corpus(1, 1, corpus_config, model_config, seed=0)
    assert len(corpus) == 1
    assert all(corpus.views[0].visible)


def test_default_corpus_counts(corpus: Corpus) -> None:
    assert len(corpus) == 256
    assert len(set(corpus.item_ids.tolist())) == 64
    assert corpus.patches().shape == (256, 16, 64)
    tokens = corpus.tokens()
    assert tokens.shape == (256, 17)
    assert np.all(tokens[:, 0] == CLS_TOKEN_ID)


def test_views_share_their_item_caption(corpus: Corpus) -> None:
    by_item: dict[int, np.ndarray] = {}
    for view in corpus.views:
        caption = by_item.setdefault(view.item_id, view.caption_tokens)
        assert np.array_equal(caption, view.caption_tokens)


def test_every_attribute_is_visible_in_some_view(corpus: Corpus) -> None:
    for item in corpus.items:
        views = [v for v in corpus.views if v.item_id == item.item_id]
        assert len(views) == 4
        assert all(any(v.visible[slot] for v in views) for slot in range(4))
        assert all(any(v.visible) for v in views)
        assert all(views[0].visible)


def test_captions_name_every_attribute(corpus: Corpus, model_config: ModelConfig) -> None:
    vocab = Vocabulary(4, 8, model_config.vocab_size, model_config.mask_token_id)
    items = {item.item_id: item for item in corpus.items}
    for view in corpus.views:
        item = items[view.item_id]
        for slot, position in enumerate(view.attribute_positions):
            assert view.caption_tokens[position] == vocab.attribute_token(slot, item.attributes[slot])
        assert model_config.mask_token_id not in view.caption_tokens.tolist()
        assert view.caption_tokens.max() < model_config.vocab_size


def test_visibility_labels_count_visible_slots(corpus: Corpus) -> None:
    for view in corpus.views:
        labels = visibility_labels(view)
        assert labels.shape == (16,)
        assert int(labels.sum()) == sum(view.visible)
        for slot, position in enumerate(view.attribute_positions):
            assert labels[position] == view.visible[slot]
    assert 0.0 < corpus.visible_token_rate() < 4.0 / 16.0


def test_region_layout_is_disjoint() -> None:
    regions = region_layout(4, 4)
    assert regions[0] == [0, 1, 4, 5]
    flat = [p for region in regions for p in region]
    assert len(flat) == len(set(flat)) == 16
    with pytest.raises(ValueError, match="do not fit"):
        region_layout(5, 1)


def test_views_differ_only_inside_the_changed_region(
    corpus_config: CorpusConfig, model_config: ModelConfig
) -> None:
    patterns = attribute_patterns(corpus_config, model_config.patch_dim)
    visible = (True, True, True, True)
    a = render_view(
        ItemSpec(0, (1, 2, 3, 4)), visible, corpus_config, model_config, patterns, make_rng(0, "r")
    )
    b = render_view(
        ItemSpec(1, (5, 2, 3, 4)), visible, corpus_config, model_config, patterns, make_rng(0, "r")
    )
    changed = np.nonzero(np.any(a != b, axis=1))[0].tolist()
    assert changed == region_layout(4, model_config.grid_size)[0]


def test_hidden_slots_keep_the_background(
    corpus_config: CorpusConfig, model_config: ModelConfig
) -> None:
    patterns = attribute_patterns(corpus_config, model_config.patch_dim)
    grid = render_view(
        ItemSpec(0, (1, 2, 3, 4)),
        (True, False, True, True),
        corpus_config,
        model_config,
        patterns,
        make_rng(0, "r"),
    )
    hidden = region_layout(4, model_config.grid_size)[1]
    assert np.max(np.abs(grid[hidden])) <= corpus_config.noise


def test_render_view_rejects_bad_visibility(
    corpus_config: CorpusConfig, model_config: ModelConfig
) -> None:
    patterns = attribute_patterns(corpus_config, model_config.patch_dim)
    item = ItemSpec(0, (1, 2, 3, 4))
    with pytest.raises(ValueError, match="shows no attribute"):
        render_view(item, (False,) * 4, corpus_config, model_config, patterns, make_rng(0, "r"))
    with pytest.raises(ShapeError):
        render_view(item, (True,) * 3, corpus_config, model_config, patterns, make_rng(0, "r"))


def test_small_vocabulary_is_rejected(corpus_config: CorpusConfig) -> None:
    tiny = ModelConfig(vocab_size=20, mask_token_id=19)
    with pytest.raises(ValueError, match="too small"):
        generate_corpus(2, 2, corpus_config, tiny, seed=0)


def test_eval_corpus_holds_unseen_items(corpus_config: CorpusConfig, model_config: ModelConfig) -> None:
    held_out = eval_corpus(corpus_config, model_config)
    assert len(held_out) == corpus_config.eval_items
    assert held_out.item_ids.min() == corpus_config.n_items
    assert len(set(held_out.item_ids.tolist())) == len(held_out)


def test_save_and_load_preserve_the_corpus(corpus: Corpus, tmp_path: Path) -> None:
    path = tmp_path / "corpus.txt"
    save_corpus(corpus, path)
    restored = load_corpus(path)
    assert restored.corpus_config == corpus.corpus_config
    assert restored.items == corpus.items
    assert np.array_equal(restored.patches(), corpus.patches())
    assert np.array_equal(restored.tokens(), corpus.tokens())
    assert np.array_equal(restored.visibility(), corpus.visibility())


def test_same_seed_gives_byte_identical_file(
    corpus_config: CorpusConfig, model_config: ModelConfig, tmp_path: Path
) -> None:
    save_corpus(training_corpus(corpus_config, model_config), tmp_path / "a.txt")
    save_corpus(training_corpus(corpus_config, model_config), tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    other = corpus_config.model_copy(update={"seed": 1})
    save_corpus(training_corpus(other, model_config), tmp_path / "c.txt")
    assert (tmp_path / "a.txt").read_bytes() != (tmp_path / "c.txt").read_bytes()


def test_load_rejects_foreign_files(tmp_path: Path) -> None:
    path = tmp_path / "other.txt"
    path.write_text('{"format": "nope"}\n')
    with pytest.raises(ValueError, match="is not a corpus file"):
        load_corpus(path)


def test_views_of_an_item_have_distinct_visibility(corpus: Corpus) -> None:
    by_item: dict[int, list[tuple[bool, ...]]] = {}
    for view in corpus.views:
        by_item.setdefault(view.item_id, []).append(view.visible)
    for patterns in by_item.values():
        assert len(set(patterns)) == len(patterns) == 4


def test_partial_patterns_are_proper_nonempty_subsets() -> None:
    patterns = partial_visibility_patterns(3)
    assert len(patterns) == len(set(patterns)) == 6
    assert all(any(p) and not all(p) for p in patterns)


def test_more_views_than_visibility_patterns_are_rejected(model_config: ModelConfig) -> None:
    with pytest.raises(ValueError, match="distinct visibility patterns"):
        CorpusConfig(n_slots=2, views_per_item=4)
    two_slots = CorpusConfig(n_slots=2, views_per_item=3)
    assert len(generate_corpus(1, 3, two_slots, model_config, seed=0)) == 3
    with pytest.raises(ValueError, match="distinct visibility patterns"):
        generate_corpus(1, 4, two_slots, model_config, seed=0)


def test_template_captions_share_the_filler_tail(corpus: Corpus) -> None:
    tails = {tuple(view.caption_tokens[4:].tolist()) for view in corpus.views}
    assert len(tails) == 1
    assert all(view.attribute_positions == (0, 1, 2, 3) for view in corpus.views)


def test_scattered_captions_vary_positions_and_fillers(model_config: ModelConfig) -> None:
    scattered = CorpusConfig(caption_layout="scattered")
    corpus = generate_corpus(16, 1, scattered, model_config, seed=0)
    assert len({view.attribute_positions for view in corpus.views}) > 1
    assert len({tuple(view.caption_tokens.tolist()) for view in corpus.views}) == 16
    assert 0.0 < corpus.visible_token_rate() <= 4.0 / 16.0
