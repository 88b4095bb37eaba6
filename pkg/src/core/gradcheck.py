from typing import Callable, Optional, Sequence

import numpy as np

from src.core.errors import ContractError
from src.core.tensor import Tape, Tensor, no_grad

DEFAULT_STEP: float = 1e-5
DENOMINATOR_FLOOR: float = 1e-12


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = DEFAULT_STEP,
    points: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` is re-evaluated with each probed coordinate shifted by ``±h``.
    When ``points`` is given, that many coordinates per tensor are sampled
    without replacement; otherwise every coordinate is probed.
    """
    if not tensors or any(t.size == 0 for t in tensors):
        raise ContractError("gradient check needs non-empty tensors")
    if any(t.dtype != np.float64 for t in tensors):
        raise ContractError("gradient check runs in 64-bit mode; cast inputs to float64")

    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    try:
        with Tape() as tape:
            loss = loss_fn()
            tape.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    finally:
        for t, flag in zip(tensors, flags):
            t.requires_grad = flag

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for tensor, grad in zip(tensors, analytic):
            if points is None or points >= tensor.size:
                indices = np.arange(tensor.size)
            else:
                indices = rng.choice(tensor.size, size=points, replace=False)
            if not tensor.data.flags.c_contiguous or not tensor.data.flags.writeable:
                tensor.data = np.array(tensor.data, order="C")
            flat = tensor.data.reshape(-1)
            for i in indices:
                original = flat[i]
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                value = float(grad.reshape(-1)[i])
                error = abs(value - numeric) / (abs(value) + abs(numeric) + DENOMINATOR_FLOOR)
                worst = max(worst, error)
    return worst


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = DEFAULT_STEP,
    points: Optional[int] = None,
    seed: int = 0,
) -> float:
    if x.size == 0:
        raise ContractError("grad_check needs a non-empty input")
    return check_gradients(lambda: f(x), [x], h=h, points=points, seed=seed)
