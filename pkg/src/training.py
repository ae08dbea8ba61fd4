"""
Joint pretraining loop.

One step runs the teacher on the full pairs (attention for mask selection,
MIM targets and ITC queue features), plans the synchronized masks, runs the
student on three pathways (masked image for MIM, masked text with the
unmasked image for MLM, unmasked pairs for ITC and ITM), backpropagates the
summed loss, applies AdamW and finally moves the teacher by EMA.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from src.config import CLS_TOKEN_ID, MaskingStrategy, TrainConfig
from src.datagen import Corpus, eval_corpus, training_corpus
from src.dependencies import RunDir
from src.errors import InvariantError, NonFiniteLossError
from src.evaluation import (
    RetrievalReport,
    evaluate_retrieval,
    project_corpus,
    visible_mask_fraction,
)
from src.losses import (
    HardNegatives,
    LossBundle,
    itc_loss,
    itm_loss,
    mim_dist,
    mine_hard_negatives,
    mlm_loss,
    total_loss,
)
from src.model import (
    CrossAttentionRecord,
    DualModel,
    ParameterSet,
    cls_rows,
    encode_image,
    encode_text,
    fuse,
    itc_project,
    itm_logits,
    mlm_logits,
    save_checkpoint,
)
from src.momentum import FeatureQueue, ema_update
from src.numerics import GradTape, backward, concat, exp, index
from src.optim import AdamW
from src.rng import make_rng
from src.sampler import Batch, SampleQueue, plan_epoch
from src.syncmask import MaskPlan, apply_image_mask, apply_text_mask, plan_masks

logger = logging.getLogger(__name__)

RANDOM_MASKING = MaskingStrategy(text="random", image="random")


@dataclass(frozen=True)
class StepMetrics:
    step: int
    epoch: int
    l_mlm: float
    l_mim: float
    l_itc: float
    l_itm: float
    l_total: float
    visible_mask_fraction: float
    wall_time: float

    def as_record(self, include_wall_time: bool = False) -> dict[str, object]:
        record: dict[str, object] = {
            "step": self.step,
            "epoch": self.epoch,
            "l_mlm": self.l_mlm,
            "l_mim": self.l_mim,
            "l_itc": self.l_itc,
            "l_itm": self.l_itm,
            "l_total": self.l_total,
            "visible_mask_fraction": self.visible_mask_fraction,
        }
        if include_wall_time:
            record["wall_time"] = self.wall_time
        return record


@dataclass(frozen=True)
class PairBatch:
    """Unmasked model inputs of one mini-batch."""

    tokens: np.ndarray
    patches: np.ndarray
    item_ids: np.ndarray
    visibility: np.ndarray

    @classmethod
    def from_corpus(cls, corpus: Corpus, example_indices: np.ndarray) -> "PairBatch":
        return cls(
            tokens=corpus.tokens(example_indices),
            patches=corpus.patches(example_indices),
            item_ids=corpus.item_ids[example_indices],
            visibility=corpus.visibility(example_indices),
        )

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class TeacherOutputs:
    record: CrossAttentionRecord
    image_feats: np.ndarray
    image_vecs: np.ndarray
    text_vecs: np.ndarray


@dataclass(frozen=True)
class StepInputs:
    """Everything the student losses depend on besides the student parameters."""

    batch: PairBatch
    m_text: np.ndarray
    m_image: np.ndarray
    teacher: TeacherOutputs
    queue_v: np.ndarray
    queue_t: np.ndarray
    positives: np.ndarray


@dataclass(frozen=True)
class Pathway:
    """Which encoder inputs a student pathway actually received masked."""

    name: str
    text_masked: bool
    image_masked: bool


@dataclass
class TrainingState:
    config: TrainConfig
    model: DualModel
    optimizer: AdamW
    queue_v: FeatureQueue
    queue_t: FeatureQueue
    step: int = 0
    total_steps: int = 1

    @classmethod
    def initialize(cls, config: TrainConfig, total_steps: int = 1) -> "TrainingState":
        model = DualModel.initialize(
            config.model, make_rng(config.seed, "init"), config.itc.tau_init
        )
        size, dim = config.itc.queue_size, config.model.proj_dim
        return cls(
            config=config,
            model=model,
            optimizer=AdamW(model.student, config.optimizer),
            queue_v=FeatureQueue.random(size, dim, make_rng(config.seed, "queue", "visual")),
            queue_t=FeatureQueue.random(size, dim, make_rng(config.seed, "queue", "textual")),
            total_steps=total_steps,
        )


@dataclass
class TrainResult:
    state: TrainingState
    metrics: list[StepMetrics] = field(default_factory=list)
    retrieval: list[RetrievalReport] = field(default_factory=list)


def teacher_pass(model: DualModel, batch: PairBatch) -> TeacherOutputs:
    """Untracked teacher forward on the full pairs."""
    text = model.encode_text(batch.tokens, use_teacher=True)
    image = model.encode_image(batch.patches, use_teacher=True)
    _, record = model.fuse(text, image, use_teacher=True, provenance="teacher:full")
    return TeacherOutputs(
        record=record,
        image_feats=image.numpy(),
        image_vecs=model.itc_project(cls_rows(image), "visual", use_teacher=True).numpy(),
        text_vecs=model.itc_project(cls_rows(text), "textual", use_teacher=True).numpy(),
    )


def plan_batch_masks(
    record: CrossAttentionRecord,
    config: TrainConfig,
    strategy: MaskingStrategy,
    step: int,
) -> list[MaskPlan]:
    """One mask plan per pair, each from its own seed stream."""
    plans: list[MaskPlan] = []
    for b in range(record.a_t2i.shape[0]):
        rng = make_rng(config.seed, "step", step, "pair", b)
        plans.append(
            plan_masks(
                record.pair(b, provenance=f"teacher:step{step}:pair{b}"),
                config.mask,
                rng,
                strategy.text,
                strategy.image,
            )
        )
    if logger.getEffectiveLevel() <= logging.DEBUG:
        for b, plan in enumerate(plans):
            logger.debug(
                f"step {step} pair {b}: idx_text={plan.idx_text} idx_image={plan.idx_image}"
            )
    return plans


def masked_tokens(tokens: np.ndarray, m_text: np.ndarray, mask_token_id: int) -> np.ndarray:
    """Apply caption masks behind the untouched [CLS] column."""
    caption = apply_text_mask(tokens[:, 1:], m_text, mask_token_id)
    return np.concatenate([tokens[:, :1], caption], axis=1)


def compute_losses(
    params: ParameterSet,
    config: TrainConfig,
    inputs: StepInputs,
    negatives: HardNegatives | None = None,
    mining_rng: np.random.Generator | None = None,
) -> tuple[LossBundle, HardNegatives, list[Pathway]]:
    """
    Student forward passes and the four objectives.

    Given fixed masks, queue snapshot and negatives this is a deterministic
    function of ``params``. Without ``negatives`` they are mined from the
    student's in-batch similarities using ``mining_rng``.
    """
    model_config = config.model
    batch = inputs.batch
    if np.any(batch.tokens[:, 0] != CLS_TOKEN_ID):
        raise ValueError("token rows must start with [CLS]")

    # MIM: masked image against the teacher's unmasked image features.
    masked_image = apply_image_mask(batch.patches, inputs.m_image)
    l_mim = mim_dist(
        inputs.teacher.image_feats,
        masked_image.encode(params, model_config),
        masked_image.m_image,
        config.mim_gamma,
    )
    mim_pathway = Pathway("mim", text_masked=False, image_masked=masked_image.omega > 0)

    # MLM: masked caption fused with the unmasked image.
    student_image = encode_image(batch.patches, params, model_config)
    text_ids = masked_tokens(batch.tokens, inputs.m_text, model_config.mask_token_id)
    student_masked_text = encode_text(text_ids, params, model_config)
    fused_mlm, _ = fuse(student_masked_text, student_image, params, model_config, "student:mlm")
    l_mlm = mlm_loss(mlm_logits(fused_mlm, params), batch.tokens[:, 1:], inputs.m_text)
    mlm_pathway = Pathway(
        "mlm", text_masked=bool(np.any(text_ids != batch.tokens)), image_masked=False
    )

    # ITC on unmasked projections against the teacher queues.
    student_text = encode_text(batch.tokens, params, model_config)
    image_cls, text_cls = cls_rows(student_image), cls_rows(student_text)
    batch_v = itc_project(image_cls, "visual", params)
    batch_t = itc_project(text_cls, "textual", params)
    l_itc = itc_loss(
        batch_v,
        batch_t,
        inputs.queue_v,
        inputs.queue_t,
        inputs.positives,
        exp(params["itc.log_tau"]),
        config.itc.soft_label_alpha,
        inputs.teacher.image_vecs,
        inputs.teacher.text_vecs,
    )

    # ITM on positives and mined in-batch negatives.
    if negatives is None:
        if mining_rng is None:
            raise ValueError("mining negatives needs a generator")
        sim_v2t = batch_v.data @ batch_t.data.T
        negatives = mine_hard_negatives(sim_v2t, sim_v2t.T.copy(), batch.item_ids, mining_rng)
    fused_pos, _ = fuse(student_text, student_image, params, model_config, "student:itm+")
    neg_text = concat([student_text, index(student_text, negatives.neg_text_for_image)], axis=0)
    neg_image = concat([index(student_image, negatives.neg_image_for_text), student_image], axis=0)
    fused_neg, _ = fuse(neg_text, neg_image, params, model_config, "student:itm-")
    l_itm = itm_loss(
        itm_logits(cls_rows(fused_pos), params), itm_logits(cls_rows(fused_neg), params)
    )

    bundle = total_loss(l_mlm, l_mim, l_itc, l_itm)
    return bundle, negatives, [mim_pathway, mlm_pathway]


def check_pathways(pathways: list[Pathway]) -> None:
    """MIM sees a masked image; MLM sees masked text with an unmasked image."""
    for pathway in pathways:
        if pathway.name == "mim" and not pathway.image_masked:
            raise InvariantError("MIM pathway received an unmasked image")
        if pathway.name == "mlm" and (pathway.image_masked or not pathway.text_masked):
            raise InvariantError(
                f"MLM pathway expects masked text and an unmasked image, got {pathway}"
            )


def check_mask_provenance(plans: list[MaskPlan], step: int) -> None:
    """Both masks of pair b come from the teacher record of pair b at this step."""
    for b, plan in enumerate(plans):
        expected = f"teacher:step{step}:pair{b}"
        if plan.provenance != expected:
            raise InvariantError(f"mask plan {b} came from {plan.provenance!r}, expected {expected!r}")


def audit_tape(tape: GradTape, model: DualModel) -> None:
    """Fail when a teacher tensor is tracked or reachable from the student's tape."""
    teacher_ids = {id(t) for t in model.teacher}
    if any(t.requires_grad for t in model.teacher):
        raise InvariantError("teacher parameters must not require gradients")
    leaked = [t.name for t in tape.leaves() if id(t) in teacher_ids]
    if leaked:
        raise InvariantError(f"teacher tensors on the training tape: {leaked}")
    for entry in tape.entries:
        if any(id(t) in teacher_ids for t in entry.inputs):
            raise InvariantError(f"teacher tensor consumed by recorded op '{entry.op}'")


def pretrain_step(
    state: TrainingState,
    batch: PairBatch,
    strategy: MaskingStrategy,
    epoch: int = 0,
) -> StepMetrics:
    """
    One optimisation step on a grouped mini-batch.

    The state (parameters, optimizer moments, queues, step counter) is only
    changed once every loss term is finite.

    Raises:
        NonFiniteLossError: a loss term is NaN or infinite; nothing was updated
        InvariantError: pathway or tape audit failed
    """
    started = time.perf_counter()
    config, model, step = state.config, state.model, state.step

    teacher = teacher_pass(model, batch)
    plans = plan_batch_masks(teacher.record, config, strategy, step)
    check_mask_provenance(plans, step)
    m_text = np.stack([p.m_text for p in plans])
    m_image = np.stack([p.m_image for p in plans])

    staged_v, staged_t = state.queue_v.copy(), state.queue_t.copy()
    positives = staged_v.enqueue(teacher.image_vecs, batch.item_ids)
    staged_t.enqueue(teacher.text_vecs, batch.item_ids)
    inputs = StepInputs(
        batch=batch,
        m_text=m_text,
        m_image=m_image,
        teacher=teacher,
        queue_v=staged_v.vectors.copy(),
        queue_t=staged_t.vectors.copy(),
        positives=positives,
    )

    with GradTape() as tape:
        try:
            bundle, _, pathways = compute_losses(
                model.student, config, inputs, mining_rng=make_rng(config.seed, "step", step, "mining")
            )
        except NonFiniteLossError as e:
            logger.error(f"Step {step} aborted: {e}")
            raise
    check_pathways(pathways)
    audit_tape(tape, model)

    grads = backward(tape, bundle.l_total)
    for tensor in model.student:
        tensor.zero_grad()
    state.optimizer.step(grads)
    ema_update(model.teacher, model.student, config.momentum.beta_at(step, state.total_steps))
    state.queue_v, state.queue_t = staged_v, staged_t
    state.step += 1

    values = bundle.values()
    metrics = StepMetrics(
        step=step,
        epoch=epoch,
        visible_mask_fraction=visible_mask_fraction(m_text, batch.visibility),
        wall_time=time.perf_counter() - started,
        **values,
    )
    logger.info(
        f"step {step} epoch {epoch} total={values['l_total']:.4f} "
        f"mlm={values['l_mlm']:.4f} mim={values['l_mim']:.4f} "
        f"itc={values['l_itc']:.4f} itm={values['l_itm']:.4f} "
        f"visible={metrics.visible_mask_fraction:.3f} ({metrics.wall_time:.2f}s)"
    )
    return metrics


def collect_features(model: DualModel, corpus: Corpus) -> SampleQueue:
    """Teacher projections of every training example for the grouped sampler."""
    image_vecs, text_vecs = project_corpus(model, corpus, use_teacher=True)
    return SampleQueue(
        example_index=np.arange(len(corpus)),
        item_ids=corpus.item_ids,
        text_vecs=text_vecs,
        image_vecs=image_vecs,
    )


def epoch_strategy(config: TrainConfig, epoch: int) -> MaskingStrategy:
    """Warm-up epochs mask at random; afterwards the configured strategy applies."""
    return RANDOM_MASKING if epoch < config.warmup_epochs else config.masking


def steps_per_epoch(config: TrainConfig) -> int:
    return config.corpus.n_pairs // config.grouping.batch_size


def pretrain(
    config: TrainConfig,
    run_dir: RunDir | None = None,
    corpus: Corpus | None = None,
    eval_set: Corpus | None = None,
) -> TrainResult:
    """
    Train for ``config.epochs`` epochs of grouped batches.

    Writes the config, one metrics line per step, each epoch's batch plan and
    the final checkpoint into ``run_dir`` when given.
    """
    corpus = corpus if corpus is not None else training_corpus(config.corpus, config.model)
    eval_set = eval_set if eval_set is not None else eval_corpus(config.corpus, config.model)
    state = TrainingState.initialize(config, total_steps=config.epochs * steps_per_epoch(config))
    result = TrainResult(state)
    if run_dir is not None:
        run_dir.write_file(run_dir.config_path.name, config.model_dump_json(indent=2))
        run_dir.reset_metrics()

    for epoch in range(config.epochs):
        plan = plan_epoch(
            collect_features(state.model, corpus),
            config.grouping,
            make_rng(config.seed, "epoch", epoch, "plan"),
        )
        if run_dir is not None:
            plan.dump(run_dir.plan_path(epoch))
        strategy = epoch_strategy(config, epoch)
        for batch in plan.batches:
            metrics = pretrain_step(state, _pairs(corpus, batch), strategy, epoch)
            result.metrics.append(metrics)
            if run_dir is not None:
                run_dir.append_metrics(metrics.as_record(config.record_wall_time))
        report = evaluate_retrieval(state.model, eval_set, config.eval_ks)
        result.retrieval.append(report)
        logger.info(
            f"Epoch {epoch} done ({strategy.text}/{strategy.image} masking): "
            f"I2T R@1={report.i2t.get(1, float('nan')):.2f} "
            f"T2I R@1={report.t2i.get(1, float('nan')):.2f}"
        )

    if run_dir is not None:
        save_checkpoint(state.model, run_dir.checkpoint_path)
    return result


def _pairs(corpus: Corpus, batch: Batch) -> PairBatch:
    return PairBatch.from_corpus(corpus, batch.example_indices)

