"""
Dense float64 tensors with reverse-mode differentiation.

Differentiable operations executed while a ``GradTape`` is active are recorded
on it; ``backward`` replays the tape in reverse execution order. Operands never
broadcast implicitly, except that the second operand of the elementwise
binary operations may have a shape equal to a trailing part of the first
operand's shape (a bias row or a scalar).

Example:

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     root = scale(sum_all(mul(x, x)), 0.5)
    >>> backward(tape, root)[x].tolist()
    [1.0, 2.0]
"""

import contextvars
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from src.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """
    Immutable float64 array, optionally tracked for gradients.

    Only ``grad`` (the accumulator) changes after construction; parameter
    updates go through ``assign``, which swaps in a new array.
    """

    __slots__ = ("_data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self._data = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        array = np.asarray(data, dtype=np.float64)
        if array.flags.writeable:
            array.flags.writeable = False
        tensor._data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError("item", self.shape, ())
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, requires_grad=False)

    def assign(self, values: np.ndarray) -> None:
        array = np.array(values, dtype=np.float64)
        if array.shape != self.shape:
            raise ShapeError("assign", self.shape, array.shape)
        array.flags.writeable = False
        self._data = array

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return index(self, key)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class GradTape:
    """
    Ordered record of executed differentiable operations.

    Use as a context manager; operations on gradient-tracked tensors inside
    the block are appended in execution order.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    _tokens: list[contextvars.Token["GradTape | None"]] = field(
        default_factory=list, repr=False
    )

    def __enter__(self) -> "GradTape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def leaves(self) -> list[Tensor]:
        """Gradient-tracked inputs that no recorded operation produced, in first-use order."""
        produced = {id(entry.output) for entry in self.entries}
        seen: set[int] = set()
        leaves: list[Tensor] = []
        for entry in self.entries:
            for tensor in entry.inputs:
                key = id(tensor)
                if tensor.requires_grad and key not in produced and key not in seen:
                    seen.add(key)
                    leaves.append(tensor)
        return leaves


def _result(
    op: str,
    inputs: tuple[Tensor, ...],
    data: np.ndarray,
    backward_fn: BackwardFn,
) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=tracked)
    if tracked and tape is not None:
        tape.record(TapeEntry(op, inputs, out, backward_fn))
    return out


def _check_trailing(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def constant(data: Any) -> Tensor:
    return Tensor(data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing("add", a, b)
    return _result(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (g, _reduce_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing("sub", a, b)
    return _result(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (g, -_reduce_to(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing("mul", a, b)
    a_data, b_data = a.data, b.data
    return _result(
        "mul",
        (a, b),
        a_data * b_data,
        lambda g: (g * b_data, _reduce_to(g * a_data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _result("scale", (a,), a.data * factor, lambda g: (g * factor,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result("exp", (a,), out, lambda g: (g * out,))


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0.0):
        raise NonFiniteError("reciprocal of zero")
    out = 1.0 / a.data
    return _result("reciprocal", (a,), out, lambda g: (-g * out * out,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has exactly ``a``'s leading axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = g @ np.swapaxes(b_data, -1, -2)
        if b_data.ndim == 2:
            k, n = b_data.shape
            grad_b = a_data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            grad_b = np.swapaxes(a_data, -1, -2) @ g
        return grad_a, grad_b

    return _result("matmul", (a, b), a_data @ b_data, backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return _result(
        "transpose",
        (a,),
        np.swapaxes(a.data, -1, -2),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", a.shape, tuple(axes))
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _result(
        "permute",
        (a,),
        np.transpose(a.data, axes),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape))
    return _result("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def index(a: Tensor, key: Any) -> Tensor:
    """Numpy-style indexing; repeated advanced indices accumulate their gradients."""
    out = np.array(a.data[key])

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return _result("index", (a,), out, backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g: np.ndarray) -> list[np.ndarray]:
        return list(np.split(g, splits, axis=axis))

    return _result(
        "concat",
        tuple(tensors),
        np.concatenate([t.data for t in tensors], axis=axis),
        backward_fn,
    )


def sum_all(a: Tensor) -> Tensor:
    return _result(
        "sum", (a,), np.array(a.data.sum()), lambda g: (np.full(a.shape, float(g)),)
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _result(
        "mean",
        (a,),
        np.array(a.data.mean()),
        lambda g: (np.full(a.shape, float(g) / n),),
    )


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("softmax_rows", (x,), p, backward_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax_rows", (x,), out, backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with the population variance, then scale and shift."""
    n = x.shape[-1] if x.ndim else 0
    if n < 2:
        raise ShapeError("layer_norm", x.shape)
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    if eps < 0:
        raise ValueError(f"layer_norm eps must be non-negative, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gain_data = gain.data

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gxhat = g * gain_data
        grad_x = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return grad_x, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(
        "layer_norm", (x, gain, bias), xhat * gain_data + bias.data, backward_fn
    )


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner),)

    return _result("gelu", (x,), 0.5 * v * (1.0 + t), backward_fn)


def l2_normalize(x: Tensor) -> Tensor:
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("l2_normalize: zero-norm vector has no direction")
    y = x.data / norm

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result("l2_normalize", (x,), y, backward_fn)


def blend_rows(x: Tensor, row: Tensor, mask: np.ndarray) -> Tensor:
    """
    Replace the rows of ``x`` selected by a binary ``mask`` with ``row``.

    ``x`` is (..., L, D), ``row`` is (D,), ``mask`` is (..., L).
    """
    m = np.asarray(mask, dtype=np.float64)
    if x.ndim < 2 or m.shape != x.shape[:-1] or row.shape != x.shape[-1:]:
        raise ShapeError("blend_rows", x.shape, row.shape, m.shape)
    selected = m[..., None]
    kept = 1.0 - selected

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g * kept, (g * selected).reshape(-1, row.shape[0]).sum(axis=0)

    return _result(
        "blend_rows", (x, row), x.data * kept + selected * row.data, backward_fn
    )


def smooth_l1(a: Tensor, b: Tensor, gamma: float = 1.0) -> Tensor:
    """Elementwise smooth L1: 0.5·d²/γ where |d| < γ, else |d| − 0.5·γ."""
    if a.shape != b.shape:
        raise ShapeError("smooth_l1", a.shape, b.shape)
    if gamma <= 0:
        raise ValueError(f"smooth_l1 gamma must be positive, got {gamma}")
    d = a.data - b.data
    ad = np.abs(d)
    quadratic = ad < gamma
    out = np.where(quadratic, 0.5 * d**2 / gamma, ad - 0.5 * gamma)
    slope = np.where(quadratic, d / gamma, np.sign(d))

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g * slope, -g * slope

    return _result("smooth_l1", (a, b), out, backward_fn)


def backward(tape: GradTape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """
    Accumulate d(root)/d(leaf) for every gradient-tracked leaf on the tape.

    Returns:
        Mapping from leaf tensor to its gradient for this call; the same
        gradients are added into each leaf's ``grad`` accumulator.
    """
    if root.ndim != 0:
        raise ShapeError("backward", root.shape, ())
    if not root.requires_grad:
        raise ValueError("backward: root was not produced on a gradient tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for entry in reversed(tape.entries):
        upstream = grads.pop(id(entry.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad

    result: dict[Tensor, np.ndarray] = {}
    for leaf in tape.leaves():
        grad = grads.get(id(leaf))
        if grad is None:
            continue
        grad = np.asarray(grad, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = grad if leaf.grad is None else leaf.grad + grad
        result[leaf] = grad
    logger.debug(f"Backward over {len(tape)} ops reached {len(result)} leaves")
    return result


def _scalar_value(value: Tensor | float) -> float:
    number = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(number):
        raise NonFiniteError(f"function value is not finite ({number})")
    return number


def finite_diff_grad(
    f: Callable[[Tensor], Tensor | float],
    x: Tensor,
    eps: float = 1e-5,
) -> Tensor:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    base = x.numpy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        f_plus = _scalar_value(f(Tensor(plus.reshape(base.shape))))
        f_minus = _scalar_value(f(Tensor(minus.reshape(base.shape))))
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad)


def numeric_gradient(
    loss_fn: Callable[[], Tensor | float],
    param: Tensor,
    eps: float = 1e-5,
    coordinates: Sequence[int] | None = None,
) -> np.ndarray:
    """
    Central differences of ``loss_fn`` with respect to a tensor it closes over.

    The tensor is perturbed in place and restored afterwards. Coordinates not
    listed in ``coordinates`` are left at zero.
    """
    original = param.numpy()
    flat = original.reshape(-1)
    estimate = np.zeros(flat.size)
    picked = range(flat.size) if coordinates is None else coordinates
    try:
        for i in picked:
            for sign in (1.0, -1.0):
                shifted = flat.copy()
                shifted[i] += sign * eps
                param.assign(shifted.reshape(original.shape))
                estimate[i] += sign * _scalar_value(loss_fn())
            estimate[i] /= 2.0 * eps
    finally:
        param.assign(original)
    return estimate.reshape(original.shape)


GRADIENT_ATOL = 1e-7


def gradient_error(
    analytic: np.ndarray, numeric: np.ndarray, atol: float = GRADIENT_ATOL
) -> float:
    """
    Normwise relative error ‖analytic − numeric‖∞ / max(‖numeric‖∞, 1e-8).

    When both sides stay below ``atol`` the plain absolute difference is
    returned instead: a gradient that is zero by construction (a key bias
    under softmax) is matched by finite-difference rounding noise only.
    """
    if not analytic.size:
        return 0.0
    diff = float(np.max(np.abs(analytic - numeric)))
    scale_ = float(np.max(np.abs(numeric)))
    if max(scale_, float(np.max(np.abs(analytic)))) < atol:
        return diff
    return diff / max(scale_, 1e-8)


def check_gradients(
    build: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coordinates: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """
    Compare tape gradients of ``build()`` with central differences.

    Args:
        build: rebuilds the scalar function from the tensors in ``params``
        params: gradient-tracked tensors to check
        eps: finite-difference step
        max_coordinates: check at most this many coordinates per tensor
        rng: picks the checked coordinates when ``max_coordinates`` is set

    Returns:
        The worst normwise relative error over all tensors
    """
    with GradTape() as tape:
        root = build()
    analytic = backward(tape, root)
    worst = 0.0
    for param in params:
        coordinates: list[int] | None = None
        if max_coordinates is not None and param.size > max_coordinates:
            chooser = rng if rng is not None else np.random.default_rng(0)
            coordinates = sorted(
                int(i) for i in chooser.choice(param.size, max_coordinates, replace=False)
            )
        numeric = numeric_gradient(build, param, eps=eps, coordinates=coordinates)
        grad = analytic.get(param, np.zeros(param.shape))
        if coordinates is not None:
            grad = grad.reshape(-1)[coordinates]
            numeric = numeric.reshape(-1)[coordinates]
        error = gradient_error(grad, numeric)
        logger.debug(f"Gradient check {param.name or param.shape}: error {error:.3e}")
        worst = max(worst, error)
    return worst
