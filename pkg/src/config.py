import math
from functools import lru_cache
from pathlib import Path
import sys
from typing import Literal

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Reserved vocabulary ids; attribute tokens start right after them.
PAD_TOKEN_ID = 0
CLS_TOKEN_ID = 1
FIRST_ATTRIBUTE_TOKEN_ID = 2


class Settings(BaseSettings):
    output_dir: Path = Path("output")
    config_path: Path | None = None
    log_level: str = "INFO"
    mlflow_tracking_uri: str | None = None
    model_config = SettingsConfigDict(
        env_prefix="SYNCMASK_", env_file=".env", extra="ignore"
    )


@lru_cache
def get_settings():
    return Settings()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Strict):
    dim: int = Field(64, ge=2)
    num_heads: int = Field(4, ge=1)
    layers_text: int = Field(2, ge=0)
    layers_vision: int = Field(2, ge=0)
    layers_fusion: int = Field(2, ge=1)
    text_len: int = Field(16, ge=1)
    grid_size: int = Field(4, ge=1)
    patch_dim: int = Field(64, ge=1)
    vocab_size: int = Field(64, ge=4)
    mask_token_id: int = 63
    proj_dim: int = Field(32, ge=1)
    init_std: float = Field(0.05, gt=0)

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if self.dim % self.num_heads:
            raise ValueError(
                f"dim ({self.dim}) must equal num_heads·head_dim; not divisible by {self.num_heads}"
            )
        if not FIRST_ATTRIBUTE_TOKEN_ID <= self.mask_token_id < self.vocab_size:
            raise ValueError(
                f"mask_token_id {self.mask_token_id} outside [{FIRST_ATTRIBUTE_TOKEN_ID}, {self.vocab_size})"
            )
        return self


class MaskConfig(_Strict):
    r_text: float = Field(0.3, ge=0.0, le=1.0)
    r_image: float = Field(0.5, ge=0.0, le=1.0)
    pool_factor: float = Field(2.0, ge=1.0)

    @staticmethod
    def mask_count(ratio: float, n: int) -> int:
        """K = round(r·n), halves rounded up."""
        return min(n, int(math.floor(ratio * n + 0.5)))

    def pool_size(self, k: int, n: int) -> int:
        """L = min(n, ceil(pool_factor·K))."""
        return min(n, int(math.ceil(self.pool_factor * k - 1e-12)))

    def text_counts(self, n: int) -> tuple[int, int]:
        k = self.mask_count(self.r_text, n)
        return k, self.pool_size(k, n)

    def image_counts(self, n: int) -> tuple[int, int]:
        k = self.mask_count(self.r_image, n)
        return k, self.pool_size(k, n)


class GroupingConfig(_Strict):
    strategy: Literal["random", "hardest", "semihard"] = "semihard"
    s: int = Field(3, ge=1)
    efn: bool = True
    collect_queue_size: int = Field(512, ge=2)
    subqueue_size: int = Field(64, ge=2)
    batch_size: int = Field(8, ge=2)

    @property
    def rank(self) -> int:
        """Rank picked at each grouping step; hardest is rank 1."""
        return 1 if self.strategy == "hardest" else self.s

    @model_validator(mode="after")
    def _check_sizes(self) -> Self:
        if self.subqueue_size % self.batch_size:
            raise ValueError(
                f"batch_size {self.batch_size} must divide subqueue_size {self.subqueue_size}"
            )
        if self.subqueue_size > self.collect_queue_size:
            raise ValueError(
                f"subqueue_size {self.subqueue_size} exceeds collect_queue_size {self.collect_queue_size}"
            )
        if self.collect_queue_size % self.subqueue_size:
            raise ValueError(
                f"subqueue_size {self.subqueue_size} must divide collect_queue_size {self.collect_queue_size}"
            )
        return self


class MomentumConfig(_Strict):
    beta: float = Field(0.99, ge=0.0, le=1.0)
    schedule: Literal["constant", "cosine"] = "constant"
    beta_end: float = Field(0.999, ge=0.0, le=1.0)

    def beta_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant" or total_steps <= 1:
            return self.beta
        progress = min(step, total_steps - 1) / (total_steps - 1)
        cosine = (1.0 + math.cos(math.pi * progress)) / 2.0
        return self.beta_end - (self.beta_end - self.beta) * cosine


class ITCConfig(_Strict):
    tau_init: float = Field(0.07, gt=0.0)
    queue_size: int = Field(256, ge=1)
    soft_label_alpha: float = Field(0.0, ge=0.0, le=1.0)


class OptimizerConfig(_Strict):
    lr: float = Field(2e-3, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)


class MaskingStrategy(_Strict):
    text: Literal["random", "attentional"] = "attentional"
    image: Literal["random", "attentional"] = "attentional"


class CorpusConfig(_Strict):
    n_items: int = Field(64, ge=1)
    views_per_item: int = Field(4, ge=1)
    n_slots: int = Field(4, ge=1)
    n_values: int = Field(8, ge=1)
    noise: float = Field(0.05, ge=0.0, le=0.05)
    # template: attributes first in slot order, then one filler tail shared by
    # every caption; scattered: attributes at random positions among per-item fillers
    caption_layout: Literal["template", "scattered"] = "template"
    seed: int = Field(0, ge=0)
    eval_items: int = Field(64, ge=1)
    eval_seed: int = Field(1, ge=0)

    @property
    def n_pairs(self) -> int:
        return self.n_items * self.views_per_item

    @model_validator(mode="after")
    def _check_views(self) -> Self:
        # One full view plus distinct non-empty proper subsets of visible slots.
        distinct = 2**self.n_slots - 1
        if self.views_per_item > distinct:
            raise ValueError(
                f"views_per_item {self.views_per_item} exceeds the {distinct} distinct "
                f"visibility patterns of {self.n_slots} slots"
            )
        return self


class TrainConfig(_Strict):
    model: ModelConfig = ModelConfig()
    mask: MaskConfig = MaskConfig()
    grouping: GroupingConfig = GroupingConfig()
    momentum: MomentumConfig = MomentumConfig()
    itc: ITCConfig = ITCConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    masking: MaskingStrategy = MaskingStrategy()
    corpus: CorpusConfig = CorpusConfig()
    epochs: int = Field(5, ge=1)
    warmup_epochs: int = Field(1, ge=0)
    seed: int = Field(0, ge=0)
    mim_gamma: float = Field(1.0, gt=0.0)
    eval_ks: tuple[int, ...] = (1, 5, 10)
    record_wall_time: bool = False
    output_dir: Path = Path("output", "run")

    @model_validator(mode="after")
    def _check_consistency(self) -> Self:
        model, corpus, grouping = self.model, self.corpus, self.grouping
        needed = FIRST_ATTRIBUTE_TOKEN_ID + corpus.n_slots * corpus.n_values + 2
        if model.vocab_size < needed:
            raise ValueError(
                f"vocab_size {model.vocab_size} too small for {corpus.n_slots}x{corpus.n_values} "
                f"attributes plus specials and filler (needs {needed})"
            )
        if model.text_len < corpus.n_slots:
            raise ValueError(
                f"text_len {model.text_len} cannot hold {corpus.n_slots} attribute tokens"
            )
        if corpus.n_pairs % grouping.subqueue_size:
            raise ValueError(
                f"corpus size {corpus.n_pairs} is not a multiple of subqueue_size {grouping.subqueue_size}"
            )
        if grouping.batch_size > self.itc.queue_size:
            raise ValueError(
                f"batch_size {grouping.batch_size} exceeds ITC queue_size {self.itc.queue_size}"
            )
        if self.mask.image_counts(model.num_patches)[0] < 1:
            raise ValueError("r_image masks no patch; the MIM term needs at least one")
        if self.mask.text_counts(model.text_len)[0] < 1:
            raise ValueError("r_text masks no token; the MLM term needs at least one")
        if corpus.eval_items < max(self.eval_ks):
            raise ValueError(
                f"eval_items {corpus.eval_items} smaller than the largest recall cut-off {max(self.eval_ks)}"
            )
        return self


def load_train_config(path: Path) -> TrainConfig:
    return TrainConfig.model_validate_json(path.read_text())
