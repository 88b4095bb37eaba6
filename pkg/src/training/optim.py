from typing import Sequence

import numpy as np

from src.core.config import TrainDefaults
from src.core.errors import ContractError
from src.core.tensor import Tensor


class Adam:
    """Adam with bias correction; moments are kept in each parameter's dtype."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (TrainDefaults.ADAM_BETA1, TrainDefaults.ADAM_BETA2),
        eps: float = TrainDefaults.ADAM_EPS,
    ):
        if lr < 0:
            raise ContractError(f"learning rate must be >= 0, got {lr}")
        if not params:
            raise ContractError("optimizer received no parameters")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = p.data - (lr * update).astype(p.dtype, copy=False)


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup over ``warmup_steps`` steps, constant afterwards. ``step`` is 0-based."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)
