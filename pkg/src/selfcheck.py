"""
Release gate: the invariant suite at tiny shapes.

Each check raises on failure; ``run_selfcheck`` runs all of them and collects
a pass/fail line per check.
"""

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from src.config import (
    CorpusConfig,
    GroupingConfig,
    ITCConfig,
    MaskConfig,
    ModelConfig,
    MomentumConfig,
    TrainConfig,
)
from src.datagen import training_corpus
from src.errors import InvariantError
from src.evaluation import recall_at_k
from src.losses import (
    HardNegatives,
    itc_loss,
    itm_loss,
    mlm_loss,
    smooth_l1,
    total_loss,
)
from src.model import init_parameters
from src.momentum import FeatureQueue, ema_update
from src.numerics import (
    Tensor,
    blend_rows,
    check_gradients,
    concat,
    constant,
    exp,
    gelu,
    index,
    l2_normalize,
    layer_norm,
    log_softmax_rows,
    matmul,
    mul,
    reciprocal,
    smooth_l1 as smooth_l1_elementwise,
    softmax_rows,
    sum_all,
)
from src.rng import make_rng
from src.sampler import brute_force_group, group_subqueue
from src.syncmask import select_mask_indices
from src.training import (
    PairBatch,
    StepInputs,
    TrainingState,
    compute_losses,
    plan_batch_masks,
    pretrain_step,
    teacher_pass,
)

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
CLOSED_FORM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def tiny_config(seed: int = 0) -> TrainConfig:
    """D=8, H=2, N=4, N_img=4, B=2, U=8."""
    return TrainConfig(
        model=ModelConfig(
            dim=8,
            num_heads=2,
            layers_text=1,
            layers_vision=1,
            layers_fusion=1,
            text_len=4,
            grid_size=2,
            patch_dim=4,
            vocab_size=16,
            mask_token_id=15,
            proj_dim=4,
            init_std=0.3,
        ),
        mask=MaskConfig(r_text=0.5, r_image=0.5),
        grouping=GroupingConfig(collect_queue_size=4, subqueue_size=4, batch_size=2),
        momentum=MomentumConfig(beta=0.0),
        itc=ITCConfig(queue_size=8),
        corpus=CorpusConfig(
            n_items=4, views_per_item=1, n_slots=2, n_values=3, eval_items=4, seed=seed
        ),
        epochs=1,
        warmup_epochs=0,
        eval_ks=(1,),
        seed=seed,
    )


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvariantError(message)


def _close(actual: float, expected: float, tolerance: float, label: str) -> None:
    _require(
        abs(actual - expected) <= tolerance,
        f"{label}: got {actual!r}, expected {expected!r} (tolerance {tolerance})",
    )


def check_smooth_l1() -> str:
    _require(smooth_l1(1.0, 0.5, 1.0) == 0.125, "smooth_l1(1, 0.5, 1) != 0.125")
    _require(smooth_l1(3.0, 0.0, 1.0) == 2.5, "smooth_l1(3, 0, 1) != 2.5")
    _require(smooth_l1(2.0, 2.0, 1.0) == 0.0, "smooth_l1(a, a) != 0")
    return "0.125, 2.5 and 0 reproduced"


def check_loss_closed_forms() -> str:
    vocab = 8
    l_mlm = mlm_loss(constant(np.zeros((3, vocab))), np.array([1, 2, 3]), np.array([1, 0, 1]))
    _close(l_mlm.item(), math.log(vocab), CLOSED_FORM_TOLERANCE, "uniform MLM")

    u = 16
    rng = make_rng(0, "selfcheck", "itc")
    vecs = rng.normal(size=(2, 4))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    l_uniform = itc_loss(
        constant(vecs), constant(vecs), np.zeros((u, 4)), np.zeros((u, 4)), np.array([0, 1]), 0.07
    )
    _close(l_uniform.item(), math.log(u), CLOSED_FORM_TOLERANCE, "uniform ITC")

    queue = np.eye(4)
    anchor = constant(np.eye(4)[:1])
    l_hard = itc_loss(anchor, anchor, queue, queue, np.array([0]), 1.0)
    _close(l_hard.item(), math.log(1.0 + 3.0 / math.e), CLOSED_FORM_TOLERANCE, "U=4 ITC")

    l_itm = itm_loss(constant(np.zeros((2, 2))), constant(np.zeros((4, 2))))
    _close(l_itm.item(), math.log(2.0), CLOSED_FORM_TOLERANCE, "zero-logit ITM")

    parts = [Tensor(v) for v in (1.0, 2.0, 3.0, 4.0)]
    bundle = total_loss(*parts)
    _close(bundle.l_total.item(), 10.0, 1e-12, "loss additivity")
    return "MLM ln 8, ITC ln U, ITC ln(1+3/e), ITM ln 2, additivity"


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    return sum_all(mul(out, constant(rng.normal(size=out.shape))))


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    def leaf(*shape: int, low: float | None = None) -> Tensor:
        values = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
        return Tensor(values, requires_grad=True)

    a, b = leaf(3, 3), leaf(3, 3)
    x, gain, bias = leaf(3, 4), leaf(4), leaf(4)
    s = leaf(2, 5)
    pos = leaf(3, low=0.5)
    row = leaf(4)
    p, q = leaf(3, 4), leaf(3, 4)
    w = {name: rng.normal(size=(3, 4)) for name in ("blend", "concat", "index")}
    mask = np.array([1.0, 0.0, 1.0])
    return {
        "matmul": (lambda: _weighted(matmul(a, b), make_rng(1, "w")), [a, b]),
        "softmax_rows": (lambda: _weighted(softmax_rows(s), make_rng(2, "w")), [s]),
        "log_softmax_rows": (lambda: _weighted(log_softmax_rows(s), make_rng(3, "w")), [s]),
        "layer_norm": (lambda: _weighted(layer_norm(x, gain, bias), make_rng(4, "w")), [x, gain, bias]),
        "gelu": (lambda: _weighted(gelu(x), make_rng(5, "w")), [x]),
        "l2_normalize": (lambda: _weighted(l2_normalize(x), make_rng(6, "w")), [x]),
        "exp": (lambda: _weighted(exp(s), make_rng(7, "w")), [s]),
        "reciprocal": (lambda: _weighted(reciprocal(pos), make_rng(8, "w")), [pos]),
        "blend_rows": (
            lambda: sum_all(mul(blend_rows(x, row, mask), constant(w["blend"]))),
            [x, row],
        ),
        "concat": (
            lambda: sum_all(mul(concat([index(p, slice(0, 2)), index(q, slice(2, 3))], axis=0), constant(w["concat"]))),
            [p, q],
        ),
        "index": (
            lambda: sum_all(mul(index(p, np.array([0, 0, 2])), constant(w["index"]))),
            [p],
        ),
        "smooth_l1": (
            lambda: _weighted(smooth_l1_elementwise(p, q, 1.0), make_rng(9, "w")),
            [p, q],
        ),
    }


def check_op_gradients(seeds: int = 20) -> str:
    worst = 0.0
    for seed in range(seeds):
        for name, (build, params) in _op_cases(make_rng(seed, "selfcheck", "ops")).items():
            error = check_gradients(build, params)
            _require(error < GRADIENT_TOLERANCE, f"{name} gradient error {error:.2e} (seed {seed})")
            worst = max(worst, error)
    return f"worst relative error {worst:.2e}"


def composite_inputs(config: TrainConfig) -> tuple[TrainingState, StepInputs]:
    """Teacher outputs, masks and a queue snapshot for one tiny batch."""
    state = TrainingState.initialize(config)
    corpus = training_corpus(config.corpus, config.model)
    batch = PairBatch.from_corpus(corpus, np.arange(config.grouping.batch_size))
    teacher = teacher_pass(state.model, batch)
    plans = plan_batch_masks(teacher.record, config, config.masking, step=0)
    queue_v, queue_t = state.queue_v.copy(), state.queue_t.copy()
    positives = queue_v.enqueue(teacher.image_vecs, batch.item_ids)
    queue_t.enqueue(teacher.text_vecs, batch.item_ids)
    inputs = StepInputs(
        batch=batch,
        m_text=np.stack([p.m_text for p in plans]),
        m_image=np.stack([p.m_image for p in plans]),
        teacher=teacher,
        queue_v=queue_v.vectors.copy(),
        queue_t=queue_t.vectors.copy(),
        positives=positives,
    )
    return state, inputs


def check_composite_gradients(seeds: int = 20, coordinates: int = 3) -> str:
    worst = 0.0
    for seed in range(seeds):
        config = tiny_config(seed)
        state, inputs = composite_inputs(config)
        negatives = HardNegatives(np.array([1, 0]), np.array([1, 0]))
        params = state.model.student

        def build() -> Tensor:
            bundle, _, _ = compute_losses(params, config, inputs, negatives=negatives)
            return bundle.l_total

        error = check_gradients(
            build, list(params), max_coordinates=coordinates, rng=make_rng(seed, "coordinates")
        )
        _require(error < GRADIENT_TOLERANCE, f"composite gradient error {error:.2e} (seed {seed})")
        worst = max(worst, error)
    return f"worst relative error {worst:.2e}"


def check_mask_selection(trials: int = 1000) -> str:
    weights = np.array([0.1, 0.4, 0.05, 0.3, 0.15])
    for seed in range(trials):
        idx = select_mask_indices(weights, 2, 3, make_rng(seed, "selfcheck", "mask"))
        _require(len(idx) == 2 and set(idx) <= {1, 3, 4}, f"selection {idx} left the top-3 set")
        exact = select_mask_indices(weights, 2, 2, make_rng(seed, "selfcheck", "mask"))
        _require(set(exact) == {1, 3}, f"L=K selection {exact} differs from the top-2")
    return f"{trials} seeded selections exact"


def check_sampler_oracle(instances: int = 100) -> str:
    q = np.array([[0.0, 0.9, 0.1], [0.9, 0.0, 0.5], [0.1, 0.5, 0.0]])
    items = np.arange(3)
    hardest = GroupingConfig(strategy="hardest", efn=False, collect_queue_size=4, subqueue_size=4, batch_size=2)
    semihard = GroupingConfig(strategy="semihard", s=2, efn=False, collect_queue_size=4, subqueue_size=4, batch_size=2)
    rng = make_rng(0, "selfcheck", "start")
    _require(group_subqueue(q, q, items, hardest, rng, start_index=0) == [0, 1, 2], "hand trace s=1")
    _require(group_subqueue(q, q, items, semihard, rng, start_index=0) == [0, 2, 1], "hand trace s=2")

    configs = [
        GroupingConfig(strategy=strategy, s=3, efn=efn, collect_queue_size=8, subqueue_size=8, batch_size=2)
        for strategy in ("hardest", "semihard")
        for efn in (False, True)
    ]
    for seed in range(instances):
        rng = make_rng(seed, "selfcheck", "oracle")
        q_v2t = rng.normal(size=(8, 8))
        q_t2v = rng.normal(size=(8, 8))
        item_ids = rng.integers(0, 3, size=8)
        start = int(rng.integers(8))
        for config in configs:
            fast = group_subqueue(q_v2t, q_t2v, item_ids, config, rng, start_index=start)
            slow = brute_force_group(q_v2t, q_t2v, item_ids, config, start)
            _require(fast == slow, f"grouping mismatch {fast} vs {slow} ({config.strategy}, efn={config.efn})")
    return f"hand traces and {instances}x{len(configs)} oracle instances agree"


def check_ema_and_queue() -> str:
    rng = make_rng(0, "selfcheck", "ema")
    config = tiny_config().model
    student = init_parameters(config, rng)
    for beta in (0.0, 0.5, 1.0):
        teacher = init_parameters(config, make_rng(1, "selfcheck", "ema"))
        before = teacher.flat()
        ema_update(teacher, student, beta)
        expected = beta * before + (1.0 - beta) * student.flat()
        _require(np.array_equal(teacher.flat(), expected), f"EMA beta={beta} not exact")

    teacher = init_parameters(config, make_rng(2, "selfcheck", "ema"))
    gap0 = teacher.flat() - student.flat()
    for _ in range(50):
        ema_update(teacher, student, 0.9)
    gap = teacher.flat() - student.flat()
    _require(bool(np.all(np.abs(gap - 0.9**50 * gap0) <= 1e-12)), "EMA geometric decay")

    queue = FeatureQueue.empty(size=3, dim=2)
    unit = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    queue.enqueue(unit[:3], np.array([0, 1, 2]))
    queue.enqueue(unit[3:], np.array([3]))
    vectors, ids = queue.contents()
    _require(ids.tolist() == [1, 2, 3] and np.array_equal(vectors, unit[1:]), "queue FIFO eviction")
    return "EMA boundaries, geometric decay and FIFO queue exact"


def check_training_step() -> str:
    config = tiny_config()
    state = TrainingState.initialize(config)
    corpus = training_corpus(config.corpus, config.model)
    batch = PairBatch.from_corpus(corpus, np.arange(config.grouping.batch_size))
    metrics = pretrain_step(state, batch, config.masking)
    _require(0.0 <= metrics.visible_mask_fraction <= 1.0, "visible mask fraction out of [0, 1]")
    _require(
        np.array_equal(state.model.teacher.flat(), state.model.student.flat()),
        "beta=0 step left teacher != student",
    )
    return f"l_total={metrics.l_total:.4f}; tape audit and provenance passed"


def check_retrieval() -> str:
    report = recall_at_k(np.eye(5), (1,))
    _require(report[1] == 100.0, "identity similarity must give R@1 = 100")
    _require(recall_at_k(np.ones((1, 1)), (1,))[1] == 100.0, "M=1 must give R@1 = 100")
    return "identity and single-pair recall exact"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("smooth_l1 identities", check_smooth_l1),
    ("loss closed forms", check_loss_closed_forms),
    ("operation gradients", check_op_gradients),
    ("composite gradients", check_composite_gradients),
    ("mask selection", check_mask_selection),
    ("sampler oracle", check_sampler_oracle),
    ("EMA and queue", check_ema_and_queue),
    ("training step audit", check_training_step),
    ("retrieval", check_retrieval),
]


def run_selfcheck(checks: list[tuple[str, Callable[[], str]]] | None = None) -> list[CheckResult]:
    results: list[CheckResult] = []
    for name, check in checks if checks is not None else CHECKS:
        started = time.perf_counter()
        try:
            detail = check()
            passed = True
        except Exception as e:
            detail = f"{type(e).__name__}: {e}"
            passed = False
        elapsed = time.perf_counter() - started
        results.append(CheckResult(name, passed, detail, elapsed))
        log = logger.info if passed else logger.error
        log(f"[{'PASS' if passed else 'FAIL'}] {name} ({elapsed:.2f}s): {detail}")
    return results
