import logging
from dataclasses import dataclass, field

import numpy as np

from src.config import OptimizerConfig
from src.errors import NonFiniteError, ShapeError
from src.model import ParameterSet
from src.numerics import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamW:
    """
    Adam with decoupled weight decay over a ``ParameterSet``.

    Decay applies to matrices and embeddings only; gains, biases and the
    temperature are left undecayed.
    """

    params: ParameterSet
    config: OptimizerConfig
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name, tensor in self.params.items():
            self._m[name] = np.zeros(tensor.shape)
            self._v[name] = np.zeros(tensor.shape)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        """Apply one update; parameters absent from ``grads`` only decay."""
        beta1, beta2 = self.config.betas
        lr, eps = self.config.lr, self.config.eps
        self.step_count += 1
        correction1 = 1.0 - beta1**self.step_count
        correction2 = 1.0 - beta2**self.step_count
        for name, tensor in self.params.items():
            grad = grads.get(tensor)
            if grad is None:
                grad = np.zeros(tensor.shape)
            elif grad.shape != tensor.shape:
                raise ShapeError(f"AdamW {name}", tensor.shape, grad.shape)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"gradient of {name} is not finite")
            m = self._m[name] = beta1 * self._m[name] + (1.0 - beta1) * grad
            v = self._v[name] = beta2 * self._v[name] + (1.0 - beta2) * grad * grad
            update = (m / correction1) / (np.sqrt(v / correction2) + eps)
            values = tensor.data
            if tensor.ndim >= 2:
                values = values * (1.0 - lr * self.config.weight_decay)
            tensor.assign(values - lr * update)
        logger.debug(f"AdamW step {self.step_count} over {len(self.params)} tensors")
