from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from src.core.errors import ContractError
from src.core.tensor import Tensor, matmul, scale
from src.utils.logger import get_logger

if TYPE_CHECKING:
    from src.core.encoder import EncoderModel

logger = get_logger(__name__)

LORA_TARGETS: tuple[str, ...] = (
    "q_proj",
    "k_proj",
    "v_proj",
    "o_proj",
    "gate_proj",
    "up_proj",
    "down_proj",
)


@dataclass
class LoraAdapter:
    """Low-rank update; the effective weight is ``W + (alpha / rank) * B @ A``."""

    target: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x: Tensor) -> Tensor:
        return scale(matmul(matmul(x, self.A.T), self.B.T), self.scaling)

    def delta(self) -> np.ndarray:
        return (self.scaling * (self.B.data @ self.A.data)).astype(self.B.dtype, copy=False)

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size


def attach_lora(
    model: "EncoderModel",
    targets: Sequence[str] = LORA_TARGETS,
    rank: int = 32,
    alpha: float = 64.0,
    seed: int = 0,
) -> "EncoderModel":
    if rank < 1:
        raise ContractError(f"LoRA rank must be >= 1, got {rank}")
    unknown = set(targets) - set(LORA_TARGETS)
    if unknown:
        raise ContractError(f"unknown LoRA targets {sorted(unknown)}")

    # validate every (block, target) pair before touching the model
    selected = [(target, projection) for _, target, projection in model.iter_projections() if target in targets]
    missing = sorted(set(targets) - {target for target, _ in selected})
    if missing:
        raise ContractError(f"LoRA targets not present in model: {missing}")
    taken = sorted({target for target, projection in selected if projection.lora is not None})
    if taken:
        raise ContractError(f"LoRA adapter already attached to {taken}")

    rng = np.random.default_rng(seed)
    for target, projection in selected:
        out_features, in_features = projection.weight.shape
        a = rng.normal(0.0, 1.0 / np.sqrt(in_features), size=(rank, in_features))
        projection.lora = LoraAdapter(
            target=target,
            A=Tensor(a.astype(projection.weight.dtype), requires_grad=True),
            B=Tensor(np.zeros((out_features, rank), dtype=projection.weight.dtype), requires_grad=True),
            rank=rank,
            alpha=float(alpha),
        )

    logger.info("lora_attached", targets=list(targets), rank=rank, alpha=alpha)
    return model


def merge_lora(model: "EncoderModel") -> "EncoderModel":
    merged = 0
    for _, _, projection in model.iter_projections():
        if projection.lora is None:
            continue
        projection.weight = Tensor(
            projection.weight.data + projection.lora.delta(),
            requires_grad=projection.weight.requires_grad,
        )
        projection.lora = None
        merged += 1
    logger.info("lora_merged", adapters=merged)
    return model


def lora_parameters(model: "EncoderModel") -> list[Tensor]:
    params: list[Tensor] = []
    for _, _, projection in model.iter_projections():
        if projection.lora is not None:
            params.extend([projection.lora.A, projection.lora.B])
    return params
