import logging
from pathlib import Path

import numpy as np
import pytest

from src.config import ModelConfig
from src.errors import ShapeError
from src.model import (
    DualModel,
    cls_rows,
    encode_image,
    encode_text,
    fuse,
    init_parameters,
    itc_project,
    itm_logits,
    load_checkpoint,
    logger,
    mlm_logits,
    parameter_shapes,
    save_checkpoint,
)
from src.rng import make_rng

logger.setLevel(logging.DEBUG)


@pytest.fixture
def config() -> ModelConfig:
    return ModelConfig(
        dim=8,
        num_heads=2,
        layers_text=1,
        layers_vision=1,
        layers_fusion=2,
        text_len=4,
        grid_size=2,
        patch_dim=4,
        vocab_size=16,
        mask_token_id=15,
        proj_dim=4,
        init_std=0.3,
    )


@pytest.fixture
def model(config: ModelConfig) -> DualModel:
    return DualModel.initialize(config, make_rng(0, "tests", "model"))


@pytest.fixture
def tokens() -> np.ndarray:
    return np.array([[1, 3, 9, 4, 12], [1, 5, 5, 2, 8]])


@pytest.fixture
def patches(config: ModelConfig) -> np.ndarray:
    return make_rng(1, "tests", "patches").normal(size=(2, config.num_patches, config.patch_dim))


def test_encoders_keep_batch_and_single_shapes(
    model: DualModel, tokens: np.ndarray, patches: np.ndarray
) -> None:
    assert model.encode_text(tokens).shape == (2, 5, 8)
    assert model.encode_text(tokens[0]).shape == (5, 8)
    assert model.encode_image(patches).shape == (2, 5, 8)
    assert model.encode_image(patches[0]).shape == (5, 8)


def test_single_sequence_matches_its_batch_row(
    model: DualModel, tokens: np.ndarray
) -> None:
    batched = model.encode_text(tokens).data
    single = model.encode_text(tokens[1]).data
    assert np.max(np.abs(batched[1] - single)) < 1e-12


def test_text_encoder_without_layers_is_embedding_plus_position(
    config: ModelConfig, tokens: np.ndarray
) -> None:
    shallow = config.model_copy(update={"layers_text": 0})
    params = init_parameters(shallow, make_rng(2, "tests", "shallow"))
    out = encode_text(tokens[0], params, shallow).data
    expected = params["text.tok_embed"].data[tokens[0]] + params["text.pos_embed"].data
    assert np.array_equal(out, expected)


def test_text_encoder_rejects_bad_ids(model: DualModel) -> None:
    with pytest.raises(ValueError, match="token ids must lie in"):
        model.encode_text(np.array([1, 2, 3, 4, 16]))
    with pytest.raises(ShapeError):
        model.encode_text(np.array([1, 2, 3]))


def test_all_zero_mask_matches_unmasked_image(model: DualModel, patches: np.ndarray) -> None:
    unmasked = model.encode_image(patches).data
    zero_mask = model.encode_image(patches, mask=np.zeros((2, 4))).data
    assert np.array_equal(unmasked, zero_mask)


def test_masked_patches_ignore_their_content(
    config: ModelConfig, model: DualModel, patches: np.ndarray
) -> None:
    mask = np.array([0, 1, 0, 0])
    altered = patches[0].copy()
    altered[1] += 10.0
    params = model.student
    a = encode_image(patches[0], params, config, mask=mask).data
    b = encode_image(altered, params, config, mask=mask).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_image_encoder_rejects_wrong_patch_count(model: DualModel) -> None:
    with pytest.raises(ShapeError):
        model.encode_image(np.zeros((3, 4)))


def test_cross_attention_rows_are_distributions(
    model: DualModel, tokens: np.ndarray, patches: np.ndarray
) -> None:
    text = model.encode_text(tokens)
    image = model.encode_image(patches)
    fused, record = model.fuse(text, image, provenance="test")
    assert fused.shape == text.shape
    assert record.batched
    assert record.a_t2i.shape == (2, 2, 5, 5)
    assert record.a_i2t.shape == (2, 2, 5, 5)
    for weights in (record.a_t2i, record.a_i2t):
        assert np.all(weights >= 0.0)
        assert np.max(np.abs(weights.sum(axis=-1) - 1.0)) < 1e-9
    single = record.pair(1, provenance="pair1")
    assert single.provenance == "pair1"
    assert np.array_equal(single.a_t2i, record.a_t2i[1])


def test_both_attention_maps_share_pairwise_scores(
    model: DualModel, tokens: np.ndarray, patches: np.ndarray
) -> None:
    _, record = model.fuse(model.encode_text(tokens), model.encode_image(patches))

    def interaction(log_weights: np.ndarray) -> np.ndarray:
        return (
            log_weights
            - log_weights.mean(axis=-1, keepdims=True)
            - log_weights.mean(axis=-2, keepdims=True)
            + log_weights.mean(axis=(-2, -1), keepdims=True)
        )

    forward = interaction(np.log(np.swapaxes(record.a_t2i, -1, -2)))
    reverse = interaction(np.log(record.a_i2t))
    assert np.max(np.abs(forward - reverse)) < 1e-9


def test_fuse_rejects_mismatched_batches(
    config: ModelConfig, model: DualModel, tokens: np.ndarray, patches: np.ndarray
) -> None:
    text = model.encode_text(tokens)
    image = model.encode_image(patches[:1])
    with pytest.raises(ShapeError):
        fuse(text, image, model.student, config)


def test_heads_have_expected_shapes(
    model: DualModel, tokens: np.ndarray, patches: np.ndarray
) -> None:
    text = model.encode_text(tokens)
    fused, _ = model.fuse(text, model.encode_image(patches))
    assert mlm_logits(fused, model.student).shape == (2, 4, 16)
    assert itm_logits(cls_rows(fused), model.student).shape == (2, 2)
    assert itm_logits(cls_rows(fused[0]), model.student).shape == (2,)


def test_itc_projections_have_unit_norm(model: DualModel, tokens: np.ndarray, patches: np.ndarray) -> None:
    image_vecs = itc_project(cls_rows(model.encode_image(patches)), "visual", model.student)
    text_vecs = model.itc_project(cls_rows(model.encode_text(tokens)), "textual")
    for vecs in (image_vecs.data, text_vecs.data):
        assert vecs.shape == (2, 4)
        assert np.max(np.abs(np.linalg.norm(vecs, axis=1) - 1.0)) < 1e-12


def test_fresh_teacher_is_bit_identical_to_student(
    model: DualModel, tokens: np.ndarray, patches: np.ndarray
) -> None:
    assert not any(t.requires_grad for t in model.teacher)
    assert all(t.requires_grad for t in model.student)
    for use_teacher in (False, True):
        assert model.params(use_teacher) is (model.teacher if use_teacher else model.student)
    student_text = model.encode_text(tokens).data
    teacher_text = model.encode_text(tokens, use_teacher=True).data
    assert np.array_equal(student_text, teacher_text)
    student_image = model.encode_image(patches).data
    teacher_image = model.encode_image(patches, use_teacher=True).data
    assert np.array_equal(student_image, teacher_image)


def test_initialization_is_seeded(config: ModelConfig) -> None:
    a = init_parameters(config, make_rng(3, "init")).flat()
    b = init_parameters(config, make_rng(3, "init")).flat()
    c = init_parameters(config, make_rng(4, "init")).flat()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_initial_temperature(model: DualModel) -> None:
    assert np.exp(model.student["itc.log_tau"].item()) == pytest.approx(0.07)
    assert np.exp(model.teacher["itc.log_tau"].item()) == pytest.approx(0.07)


def test_parameter_layout_follows_config(config: ModelConfig, model: DualModel) -> None:
    shapes = parameter_shapes(config)
    assert model.student.names() == list(shapes)
    assert shapes["vision.pos_embed"] == (5, 8)
    assert shapes["fusion.1.cross.q.w"] == (8, 8)
    assert shapes["itc.log_tau"] == ()


def test_checkpoint_round_trip(model: DualModel, tmp_path: Path) -> None:
    path = tmp_path / "nested" / "checkpoint.bin"
    save_checkpoint(model, path)
    restored = load_checkpoint(path)
    assert restored.config == model.config
    assert np.array_equal(restored.student.flat(), model.student.flat())
    assert np.array_equal(restored.teacher.flat(), model.teacher.flat())
    assert all(t.requires_grad for t in restored.student)
    assert not any(t.requires_grad for t in restored.teacher)

    save_checkpoint(restored, tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_load_checkpoint_rejects_other_files(tmp_path: Path) -> None:
    path = tmp_path / "bogus.bin"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError, match="is not a checkpoint"):
        load_checkpoint(path)
