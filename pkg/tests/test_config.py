from pathlib import Path

import pytest
from pydantic import ValidationError

from src.config import (
    CorpusConfig,
    GroupingConfig,
    MaskConfig,
    ModelConfig,
    Settings,
    TrainConfig,
    load_train_config,
)


def test_defaults_are_consistent() -> None:
    config = TrainConfig()
    assert config.model.head_dim == 16
    assert config.model.num_patches == 16
    assert config.corpus.n_pairs == 256
    assert config.grouping.rank == 3
    assert (config.epochs, config.warmup_epochs) == (5, 1)
    assert config.model.init_std == 0.05
    assert config.optimizer.lr == 2e-3
    assert config.corpus.caption_layout == "template"


def test_mask_counts_round_halves_up() -> None:
    assert MaskConfig.mask_count(0.3, 16) == 5
    assert MaskConfig.mask_count(0.5, 3) == 2
    assert MaskConfig.mask_count(0.25, 2) == 1
    assert MaskConfig.mask_count(1.0, 4) == 4
    mask = MaskConfig()
    assert mask.text_counts(16) == (5, 10)
    assert mask.image_counts(16) == (8, 16)


def test_hardest_grouping_uses_rank_one() -> None:
    assert GroupingConfig(strategy="hardest").rank == 1


@pytest.mark.parametrize(
    "build, message",
    [
        (lambda: ModelConfig(dim=6, num_heads=4), "not divisible"),
        (lambda: ModelConfig(mask_token_id=64), "outside"),
        (lambda: GroupingConfig(batch_size=3), "must divide"),
        (lambda: GroupingConfig(collect_queue_size=32), "exceeds"),
        (lambda: TrainConfig(model=ModelConfig(vocab_size=20, mask_token_id=19)), "too small"),
        (lambda: TrainConfig(corpus=CorpusConfig(eval_items=5)), "largest recall cut-off"),
        (lambda: TrainConfig(corpus=CorpusConfig(n_items=60)), "not a multiple"),
        (lambda: CorpusConfig(n_slots=2, views_per_item=4), "distinct visibility patterns"),
        (lambda: CorpusConfig(caption_layout="sorted"), "caption_layout"),
        (lambda: TrainConfig.model_validate({"epochs": 1, "learning_rate": 0.1}), "learning_rate"),
    ],
)
def test_invalid_configs_are_rejected(build, message: str) -> None:
    with pytest.raises(ValidationError, match=message):
        build()


def test_config_file_round_trip(tmp_path: Path) -> None:
    config = TrainConfig(seed=3, epochs=2)
    path = tmp_path / "config.json"
    path.write_text(config.model_dump_json(indent=2))
    assert load_train_config(path) == config


def test_settings_read_the_environment(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    monkeypatch.setenv("SYNCMASK_LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("SYNCMASK_CONFIG_PATH", str(tmp_path / "c.json"))
    settings = Settings()
    assert settings.log_level == "DEBUG"
    assert settings.config_path == tmp_path / "c.json"
