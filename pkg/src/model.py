"""
Text, vision and fusion transformers shared by the student and its EMA teacher.

All encoders accept a single sequence or a batch with a leading batch axis and
return features of the matching rank. Blocks are pre-norm with a GELU
feed-forward of width 4·dim; there is no dropout.
"""

import json
import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from src.config import ModelConfig
from src.errors import ShapeError
from src.numerics import (
    Tensor,
    add,
    blend_rows,
    concat,
    gelu,
    index,
    l2_normalize,
    layer_norm,
    matmul,
    permute,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "syncmask-checkpoint/1"


class ParameterSet:
    """Named tensors in a fixed declaration order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)
        for name, tensor in self._tensors.items():
            tensor.name = name

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self._tensors.values()]

    def clone(self, requires_grad: bool) -> "ParameterSet":
        return ParameterSet(
            {
                name: Tensor(t.data, requires_grad=requires_grad)
                for name, t in self._tensors.items()
            }
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def load_flat(self, values: np.ndarray) -> None:
        expected = sum(t.size for t in self._tensors.values())
        if values.size != expected:
            raise ShapeError("load_flat", (expected,), values.shape)
        offset = 0
        for tensor in self._tensors.values():
            tensor.assign(values[offset : offset + tensor.size].reshape(tensor.shape))
            offset += tensor.size


@dataclass(frozen=True)
class CrossAttentionRecord:
    """
    Last-layer cross-attention in both directions.

    ``a_t2i`` is (H, N+1, N_img+1) with text-query rows; ``a_i2t`` is
    (H, N_img+1, N+1) with image-query rows. A leading batch axis is present
    when the fusion ran on a batch.
    """

    a_t2i: np.ndarray
    a_i2t: np.ndarray
    provenance: str = ""

    @property
    def batched(self) -> bool:
        return self.a_t2i.ndim == 4

    def pair(self, b: int, provenance: str | None = None) -> "CrossAttentionRecord":
        if not self.batched:
            raise ShapeError("CrossAttentionRecord.pair", self.a_t2i.shape)
        return CrossAttentionRecord(
            self.a_t2i[b],
            self.a_i2t[b],
            provenance if provenance is not None else f"{self.provenance}#{b}",
        )


def _block_shapes(prefix: str, dim: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for ln in ("ln1", "ln2"):
        shapes[f"{prefix}.{ln}.gain"] = (dim,)
        shapes[f"{prefix}.{ln}.bias"] = (dim,)
    shapes.update(_attention_shapes(f"{prefix}.attn", dim))
    shapes.update(_ffn_shapes(f"{prefix}.ffn", dim))
    return shapes


def _attention_shapes(prefix: str, dim: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.{proj}.w"] = (dim, dim)
        shapes[f"{prefix}.{proj}.b"] = (dim,)
    return shapes


def _ffn_shapes(prefix: str, dim: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1.w": (dim, 4 * dim),
        f"{prefix}.w1.b": (4 * dim,),
        f"{prefix}.w2.w": (4 * dim, dim),
        f"{prefix}.w2.b": (dim,),
    }


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in declaration (and checkpoint) order."""
    dim = config.dim
    shapes: dict[str, tuple[int, ...]] = {
        "text.tok_embed": (config.vocab_size, dim),
        "text.pos_embed": (config.text_len + 1, dim),
    }
    for layer in range(config.layers_text):
        shapes.update(_block_shapes(f"text.{layer}", dim))
    shapes.update(
        {
            "vision.patch.w": (config.patch_dim, dim),
            "vision.patch.b": (dim,),
            "vision.cls": (1, dim),
            "vision.pos_embed": (config.num_patches + 1, dim),
            "vision.mask_embed": (dim,),
        }
    )
    for layer in range(config.layers_vision):
        shapes.update(_block_shapes(f"vision.{layer}", dim))
    for layer in range(config.layers_fusion):
        prefix = f"fusion.{layer}"
        shapes.update(_block_shapes(prefix, dim))
        for ln in ("ln_q", "ln_kv", "ln3"):
            shapes[f"{prefix}.{ln}.gain"] = (dim,)
            shapes[f"{prefix}.{ln}.bias"] = (dim,)
        shapes.update(_attention_shapes(f"{prefix}.cross", dim))
    shapes.update(
        {
            "mlm.w": (dim, config.vocab_size),
            "mlm.b": (config.vocab_size,),
            "itm.w": (dim, 2),
            "itm.b": (2,),
            "itc.g_v": (dim, config.proj_dim),
            "itc.g_t": (dim, config.proj_dim),
            "itc.log_tau": (),
        }
    )
    return shapes


def init_parameters(
    config: ModelConfig, rng: np.random.Generator, tau_init: float = 0.07
) -> ParameterSet:
    """
    Draw a fresh gradient-tracked parameter set.

    Matrices and embeddings are N(0, init_std²), LayerNorm gains are one,
    biases are zero and the temperature starts at ``tau_init``.
    """
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "itc.log_tau":
            values = np.array(math.log(tau_init))
        elif name.endswith(".gain"):
            values = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, config.init_std, size=shape)
        tensors[name] = Tensor(values, requires_grad=True)
    return ParameterSet(tensors)


def _promote(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1, *x.shape)), True
    if x.ndim == 3:
        return x, False
    raise ShapeError("promote", x.shape)


def _demote(x: Tensor, single: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if single else x


def _linear(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return add(matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _norm(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, dim = x.shape
    return permute(reshape(x, (batch, length, heads, dim // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, width = x.shape
    return reshape(permute(x, (0, 2, 1, 3)), (batch, length, heads * width))


def _attention(
    x_q: Tensor, x_kv: Tensor, params: ParameterSet, prefix: str, heads: int
) -> tuple[Tensor, Tensor]:
    q = _split_heads(_linear(x_q, params, f"{prefix}.q"), heads)
    k = _split_heads(_linear(x_kv, params, f"{prefix}.k"), heads)
    v = _split_heads(_linear(x_kv, params, f"{prefix}.v"), heads)
    width = q.shape[-1]
    weights = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(width)))
    out = _linear(_merge_heads(matmul(weights, v)), params, f"{prefix}.o")
    return out, weights


def _reverse_attention_map(
    x_q: np.ndarray, x_kv: np.ndarray, params: ParameterSet, prefix: str, heads: int
) -> np.ndarray:
    """
    Attention of ``x_kv`` rows over ``x_q`` rows from the layer's own logits.

    The query-key logits of the forward direction are transposed and
    normalised over the ``x_q`` axis, so both maps share every pairwise score.
    """
    batch, n_q, dim = x_q.shape
    n_kv = x_kv.shape[1]
    width = dim // heads
    q = x_q @ params[f"{prefix}.q.w"].data + params[f"{prefix}.q.b"].data
    k = x_kv @ params[f"{prefix}.k.w"].data + params[f"{prefix}.k.b"].data
    q = q.reshape(batch, n_q, heads, width).transpose(0, 2, 1, 3)
    k = k.reshape(batch, n_kv, heads, width).transpose(0, 2, 1, 3)
    logits = k @ np.swapaxes(q, -1, -2) / math.sqrt(width)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _feed_forward(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return _linear(gelu(_linear(x, params, f"{prefix}.w1")), params, f"{prefix}.w2")


def _self_block(x: Tensor, params: ParameterSet, prefix: str, heads: int) -> Tensor:
    h = _norm(x, params, f"{prefix}.ln1")
    attended, _ = _attention(h, h, params, f"{prefix}.attn", heads)
    x = add(x, attended)
    return add(x, _feed_forward(_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn"))


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim not in (1, 2) or ids.shape[-1] != config.text_len + 1:
        raise ShapeError("encode_text", ids.shape, (config.text_len + 1,))
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(
            f"token ids must lie in [0, {config.vocab_size}), got range [{ids.min()}, {ids.max()}]"
        )
    return ids.astype(np.int64)


def embed_text(tokens: np.ndarray, params: ParameterSet, config: ModelConfig) -> Tensor:
    """Token embedding plus learned position, before any block."""
    ids = _check_tokens(tokens, config)
    return add(index(params["text.tok_embed"], ids), params["text.pos_embed"])


def encode_text(tokens: np.ndarray, params: ParameterSet, config: ModelConfig) -> Tensor:
    """
    Text encoder over ``[CLS] t_1 … t_N``.

    Args:
        tokens: ids of shape (N+1,) or (B, N+1), [CLS] at position 0
        params: student or teacher parameters
        config: model shape

    Returns:
        Features of shape (N+1, D) or (B, N+1, D)
    """
    x, single = _promote(embed_text(tokens, params, config))
    for layer in range(config.layers_text):
        x = _self_block(x, params, f"text.{layer}", config.num_heads)
    return _demote(x, single)


def embed_image(
    patches: np.ndarray | Tensor,
    params: ParameterSet,
    config: ModelConfig,
    mask: np.ndarray | None = None,
) -> Tensor:
    """
    Patch projection, mask-embedding replacement, [CLS] and position.

    Masked patches have their projected embedding replaced by the learnable
    mask embedding before the positional embedding is added.
    """
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    x, single = _promote(x)
    batch, n_patches, patch_dim = x.shape
    if n_patches != config.num_patches or patch_dim != config.patch_dim:
        raise ShapeError(
            "encode_image", x.shape[1:], (config.num_patches, config.patch_dim)
        )
    projected = _linear(x, params, "vision.patch")
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(batch, -1)
        if m.shape[1] != config.num_patches:
            raise ShapeError("encode_image mask", m.shape, (config.num_patches,))
        projected = blend_rows(projected, params["vision.mask_embed"], m)
    cls_rows = index(params["vision.cls"], np.zeros((batch, 1), dtype=np.int64))
    embedded = add(concat([cls_rows, projected], axis=1), params["vision.pos_embed"])
    return _demote(embedded, single)


def encode_image(
    patches: np.ndarray | Tensor,
    params: ParameterSet,
    config: ModelConfig,
    mask: np.ndarray | None = None,
) -> Tensor:
    """
    Vision encoder over ``[CLS] p_1 … p_N_img``.

    Args:
        patches: (N_img, patch_dim) or (B, N_img, patch_dim)
        params: student or teacher parameters
        config: model shape
        mask: optional binary vector(s) of length N_img

    Returns:
        Features of shape (N_img+1, D) or (B, N_img+1, D)
    """
    x, single = _promote(embed_image(patches, params, config, mask))
    for layer in range(config.layers_vision):
        x = _self_block(x, params, f"vision.{layer}", config.num_heads)
    return _demote(x, single)


def fuse(
    text_feats: Tensor,
    img_feats: Tensor,
    params: ParameterSet,
    config: ModelConfig,
    provenance: str = "",
) -> tuple[Tensor, CrossAttentionRecord]:
    """
    Multimodal encoder following the text sequence, with the image as key/value.

    Each layer runs text self-attention, text-query/image-key cross-attention
    and a feed-forward. In the last layer the image-query/text-key map is also
    read off the same cross-attention logits, transposed and normalised over
    the text positions.

    Returns:
        Fused features shaped like ``text_feats`` and the attention record
    """
    t, single = _promote(text_feats)
    img, img_single = _promote(img_feats)
    if single != img_single or t.shape[0] != img.shape[0]:
        raise ShapeError("fuse", text_feats.shape, img_feats.shape)
    if t.shape[-1] != config.dim or img.shape[-1] != config.dim:
        raise ShapeError("fuse", text_feats.shape, img_feats.shape)

    heads = config.num_heads
    a_t2i = a_i2t = np.empty(0)
    for layer in range(config.layers_fusion):
        prefix = f"fusion.{layer}"
        h = _norm(t, params, f"{prefix}.ln1")
        attended, _ = _attention(h, h, params, f"{prefix}.attn", heads)
        t = add(t, attended)
        q_in = _norm(t, params, f"{prefix}.ln_q")
        kv = _norm(img, params, f"{prefix}.ln_kv")
        crossed, weights = _attention(q_in, kv, params, f"{prefix}.cross", heads)
        t = add(t, crossed)
        t = add(t, _feed_forward(_norm(t, params, f"{prefix}.ln3"), params, f"{prefix}.ffn"))
        if layer == config.layers_fusion - 1:
            a_t2i = weights.numpy()
            a_i2t = _reverse_attention_map(
                q_in.data, kv.data, params, f"{prefix}.cross", heads
            )

    if single:
        a_t2i, a_i2t = a_t2i[0], a_i2t[0]
    return _demote(t, single), CrossAttentionRecord(a_t2i, a_i2t, provenance)


def _rows_after_cls(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return index(x, slice(1, None))
    return index(x, (slice(None), slice(1, None)))


def mlm_logits(mm_feats: Tensor, params: ParameterSet) -> Tensor:
    """Vocabulary logits for the non-[CLS] rows: (N, V) or (B, N, V)."""
    return _linear(_rows_after_cls(mm_feats), params, "mlm")


def itm_logits(mm_cls: Tensor, params: ParameterSet) -> Tensor:
    """Matched/unmatched logits from fused [CLS] rows: (2,) or (B, 2)."""
    if mm_cls.ndim == 1:
        row = reshape(mm_cls, (1, mm_cls.shape[0]))
        return reshape(_linear(row, params, "itm"), (2,))
    return _linear(mm_cls, params, "itm")


def itc_project(
    cls: Tensor, which: Literal["visual", "textual"], params: ParameterSet
) -> Tensor:
    """Map [CLS] rows to unit vectors with g_v or g_t (no bias, so direction is scale free)."""
    weight = params["itc.g_v" if which == "visual" else "itc.g_t"]
    if cls.ndim == 1:
        row = reshape(cls, (1, cls.shape[0]))
        return reshape(l2_normalize(matmul(row, weight)), (weight.shape[1],))
    return l2_normalize(matmul(cls, weight))


def cls_rows(feats: Tensor) -> Tensor:
    if feats.ndim == 2:
        return index(feats, 0)
    return index(feats, (slice(None), 0))


@dataclass
class DualModel:
    """Student parameters θ and the EMA teacher θ′ with identical layout."""

    config: ModelConfig
    student: ParameterSet
    teacher: ParameterSet

    @classmethod
    def initialize(
        cls, config: ModelConfig, rng: np.random.Generator, tau_init: float = 0.07
    ) -> "DualModel":
        student = init_parameters(config, rng, tau_init)
        return cls(config, student, student.clone(requires_grad=False))

    def params(self, use_teacher: bool = False) -> ParameterSet:
        return self.teacher if use_teacher else self.student

    def encode_text(self, tokens: np.ndarray, use_teacher: bool = False) -> Tensor:
        return encode_text(tokens, self.params(use_teacher), self.config)

    def encode_image(
        self,
        patches: np.ndarray | Tensor,
        mask: np.ndarray | None = None,
        use_teacher: bool = False,
    ) -> Tensor:
        return encode_image(patches, self.params(use_teacher), self.config, mask)

    def fuse(
        self,
        text_feats: Tensor,
        img_feats: Tensor,
        use_teacher: bool = False,
        provenance: str = "",
    ) -> tuple[Tensor, CrossAttentionRecord]:
        return fuse(text_feats, img_feats, self.params(use_teacher), self.config, provenance)

    def itc_project(
        self,
        cls: Tensor,
        which: Literal["visual", "textual"],
        use_teacher: bool = False,
    ) -> Tensor:
        return itc_project(cls, which, self.params(use_teacher))


def save_checkpoint(model: DualModel, path: Path) -> None:
    """
    Write one textual header line, then student and teacher values as
    little-endian float64 in declaration order.
    """
    header = {
        "format": CHECKPOINT_MAGIC,
        "config": model.config.model_dump(mode="json"),
        "parameters": [[name, list(t.shape)] for name, t in model.student.items()],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(model.student.flat().astype("<f8").tobytes())
        f.write(model.teacher.flat().astype("<f8").tobytes())
    logger.info(f"Saved checkpoint with {len(model.student)} tensors to {path}")


def load_checkpoint(path: Path) -> DualModel:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        payload = f.read()
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint ({header.get('format')!r})")
    config = ModelConfig.model_validate(header["config"])
    shapes = parameter_shapes(config)
    declared = [(name, tuple(shape)) for name, shape in header["parameters"]]
    if declared != list(shapes.items()):
        raise ValueError(f"{path}: parameter layout does not match its config")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    size = sum(int(np.prod(s)) for s in shapes.values())
    if values.size != 2 * size:
        raise ShapeError("load_checkpoint", (2 * size,), values.shape)
    student = ParameterSet({n: Tensor(np.zeros(s), requires_grad=True) for n, s in shapes.items()})
    teacher = ParameterSet({n: Tensor(np.zeros(s)) for n, s in shapes.items()})
    student.load_flat(values[:size])
    teacher.load_flat(values[size:])
    return DualModel(config, student, teacher)
