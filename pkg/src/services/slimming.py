"""MLP width reduction through learned per-neuron gates.

Each retained gated MLP gets a vector ``z`` (all ones at install) applied as
``ReLU(z)`` to its intermediate activations. The gates are trained under
InfoNCE plus a sigmoid magnitude penalty, ranked globally, frozen to a binary
mask, and the masked neurons are finally cut out of the weight matrices.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.config import SlimDefaults, TrainDefaults
from src.core.encoder import EncoderModel, count_params
from src.core.errors import ContractError, NumericError
from src.core.tensor import Tape, Tensor, absolute, concat, scale, sigmoid
from src.core.tensor import sum as tensor_sum
from src.training.callbacks import StepRecord, TrainingCallback
from src.training.datasets import TripletBatch, TripletRecord
from src.training.optim import Adam
from src.training.trainer import (
    LossTerms,
    RetrievalTrainer,
    TrainConfig,
    TrainResult,
    retrieval_loss,
    run_training_loop,
)
from src.utils.logger import get_logger

logger = get_logger(__name__)


class SlimConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    l0_weight: float = Field(default=SlimDefaults.LAMBDA, ge=0, alias="lambda")
    beta: float = Field(default=SlimDefaults.BETA, gt=0)
    steps: int = Field(default=SlimDefaults.STEPS, ge=1)
    prune_ratio: float = Field(default=SlimDefaults.PRUNE_RATIO, ge=0, lt=1)
    learning_rate: float = Field(default=SlimDefaults.LEARNING_RATE, ge=0)
    batch_size: int = Field(default=TrainDefaults.BATCH_SIZE, ge=1)
    tau: float = Field(default=TrainDefaults.TAU, gt=0)
    use_in_batch_negatives: bool = True
    seed: int = 0
    log_freq: int = Field(default=TrainDefaults.LOG_FREQ, ge=1)


@dataclass
class SlimState:
    gates: dict[int, Tensor]
    frozen: dict[int, bool]

    @classmethod
    def from_model(cls, model: EncoderModel) -> "SlimState":
        gated = [(index, mlp) for index, mlp in model.mlp_layers() if mlp.z is not None]
        if not gated:
            raise ContractError("no gates installed")
        return cls(
            gates={index: mlp.z for index, mlp in gated},
            frozen={index: mlp.gate_frozen for index, mlp in gated},
        )

    @property
    def total(self) -> int:
        return int(sum(z.size for z in self.gates.values()))

    def trainable(self) -> list[Tensor]:
        return [z for index, z in self.gates.items() if not self.frozen[index]]


@dataclass
class PruneMask:
    masks: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    @property
    def zeros(self) -> int:
        return int(sum((m == 0).sum() for m in self.masks.values()))

    def zeros_per_layer(self) -> dict[int, int]:
        return {layer: int((m == 0).sum()) for layer, m in self.masks.items()}

    def to_dict(self) -> dict:
        return {str(layer): m.astype(int).tolist() for layer, m in sorted(self.masks.items())}

    @staticmethod
    def from_dict(data: dict) -> "PruneMask":
        masks = {}
        for layer, values in data.items():
            m = np.asarray(values, dtype=np.int64)
            if not np.isin(m, (0, 1)).all():
                raise ContractError(f"mask for layer {layer} is not binary")
            masks[int(layer)] = m.astype(bool)
        return PruneMask(masks=masks)


def install_gates(model: EncoderModel) -> EncoderModel:
    """Attach all-ones gates to every MLP in place; only the gates stay trainable."""
    layers = model.mlp_layers()
    if not layers:
        raise ContractError("model has no MLP sublayer to gate")
    if any(mlp.z is not None for _, mlp in layers):
        raise ContractError("gates already installed")
    model.freeze()
    for _, mlp in layers:
        mlp.z = Tensor(np.ones(mlp.width, dtype=model.dtype), requires_grad=True)
        mlp.gate_frozen = False
    logger.info("gates_installed", layers=[index for index, _ in layers], entries=sum(m.width for _, m in layers))
    return model


def l0_surrogate(z_all: Tensor, beta: float = SlimDefaults.BETA) -> Tensor:
    """``sum(sigmoid(beta * |z|))``: 0.5 per zero entry, approaching 1 as ``|z|`` grows."""
    if beta <= 0:
        raise ContractError(f"beta must be > 0, got {beta}")
    return tensor_sum(sigmoid(scale(absolute(z_all), beta)))


def _require_trainable_gates(model: EncoderModel) -> SlimState:
    state = SlimState.from_model(model)
    if not state.trainable():
        raise ContractError("gates are frozen; nothing to train")
    return state


def slim_loss(model: EncoderModel, batch: TripletBatch, config: SlimConfig) -> LossTerms:
    state = _require_trainable_gates(model)
    contrastive = retrieval_loss(
        model, batch, tau=config.tau, in_batch=config.use_in_batch_negatives, distill_weight=0.0
    ).total
    penalty = scale(l0_surrogate(concat(list(state.gates.values()), axis=0), config.beta), config.l0_weight)
    return LossTerms(
        total=contrastive + penalty,
        components={"infonce": contrastive.item(), "surrogate": penalty.item()},
    )


def slim_train_step(
    model: EncoderModel,
    batch: TripletBatch,
    config: SlimConfig,
    optimizer: Optional[Adam] = None,
) -> dict[str, float]:
    """One Adam step on the gates alone; returns the loss terms before the update."""
    state = _require_trainable_gates(model)
    optimizer = optimizer or Adam(state.trainable(), lr=config.learning_rate)
    with Tape() as tape:
        terms = slim_loss(model, batch, config)
        values = terms.as_dict()
        if not all(np.isfinite(v) for v in values.values()):
            raise NumericError(f"slim: non-finite loss {values}")
        tape.backward(terms.total)
    optimizer.step()
    optimizer.zero_grad()
    return values


class SlimmingTrainer:
    def __init__(self, config: SlimConfig, callbacks: Optional[Sequence[TrainingCallback]] = None):
        self.config = config
        self.callbacks = list(callbacks or [])

    def train(self, model: EncoderModel, records: Sequence[TripletRecord]) -> TrainResult:
        """Train the installed gates of ``model`` in place for ``config.steps`` steps."""
        state = _require_trainable_gates(model)
        history = run_training_loop(
            model,
            records,
            state.trainable(),
            lambda m, batch: slim_loss(m, batch, self.config),
            phase="slim",
            learning_rate=self.config.learning_rate,
            batch_size=self.config.batch_size,
            epochs=None,
            max_steps=self.config.steps,
            seed=self.config.seed,
            callbacks=self.callbacks,
        )
        return TrainResult(
            model=model,
            history=history,
            metadata={"phase": "slim", "steps": len(history), "trainable": "gates", "gate_entries": state.total},
        )


def global_prune(state: SlimState, prune_ratio: float = SlimDefaults.PRUNE_RATIO) -> PruneMask:
    """Zero the globally lowest ``round(ratio * N)`` values of ``ReLU(z)``.

    Ties go to the lower (layer, neuron) pair first.
    """
    if not 0 <= prune_ratio < 1:
        raise ContractError(f"prune_ratio must be in [0, 1), got {prune_ratio}")
    layers = sorted(state.gates)
    values = np.concatenate([np.maximum(state.gates[i].data.astype(np.float64), 0.0) for i in layers])
    layer_ids = np.concatenate([np.full(state.gates[i].size, i) for i in layers])
    neuron_ids = np.concatenate([np.arange(state.gates[i].size) for i in layers])

    total = values.size
    n_zero = int(np.floor(prune_ratio * total + 0.5))
    if n_zero >= total:
        raise ContractError(f"prune_ratio={prune_ratio} would zero all {total} gate entries")

    order = np.lexsort((neuron_ids, layer_ids, values))
    keep = np.ones(total, dtype=bool)
    keep[order[:n_zero]] = False

    masks = {}
    offset = 0
    for i in layers:
        size = state.gates[i].size
        masks[i] = keep[offset : offset + size].copy()
        offset += size
    mask = PruneMask(masks=masks)
    logger.info("gates_ranked", entries=total, zeros=mask.zeros, per_layer=mask.zeros_per_layer())
    return mask


def _check_mask(model: EncoderModel, mask: PruneMask) -> None:
    for layer, m in mask.masks.items():
        if not 0 <= layer < model.n_layers or model.blocks[layer].mlp is None:
            raise ContractError(f"mask references layer {layer}, which has no MLP")
        width = model.blocks[layer].mlp.width
        if m.shape != (width,):
            raise ContractError(f"mask for layer {layer} has shape {m.shape}, MLP width is {width}")


def apply_mask(model: EncoderModel, mask: PruneMask) -> EncoderModel:
    """Freeze each gate to its binary mask in place; the gates stop being parameters."""
    _check_mask(model, mask)
    for layer, m in mask.masks.items():
        mlp = model.blocks[layer].mlp
        mlp.z = Tensor(m.astype(model.dtype), requires_grad=False)
        mlp.gate_frozen = True
    logger.info("mask_applied", zeros=mask.zeros, total=mask.total)
    return model


def shrink(model: EncoderModel, mask: PruneMask) -> EncoderModel:
    """Physically remove masked intermediate neurons; a fully masked MLP is dropped."""
    _check_mask(model, mask)
    before = count_params(model)
    slim = model.copy()
    dropped = []
    for layer, m in sorted(mask.masks.items()):
        block = slim.blocks[layer]
        keep = np.flatnonzero(m)
        if keep.size == 0:
            block.drop_mlp()
            dropped.append(layer)
            continue
        mlp = block.mlp
        mlp.gate_proj.keep_outputs(keep)
        mlp.up_proj.keep_outputs(keep)
        mlp.down_proj.keep_inputs(keep)
        mlp.z = None
        mlp.gate_frozen = False
    logger.info(
        "mlp_shrunk",
        zeros=mask.zeros,
        dropped_layers=dropped,
        params_before=before,
        params_after=count_params(slim),
    )
    return slim


def expected_shrink_delta(model: EncoderModel, mask: PruneMask) -> int:
    """Parameters removed by ``shrink``: ``3d`` per masked neuron plus ``d`` per emptied layer."""
    d = model.config.d_model
    emptied = sum(1 for m in mask.masks.values() if not m.any())
    return 3 * d * mask.zeros + d * emptied


@dataclass
class SlimOutcome:
    model: EncoderModel
    mask: PruneMask
    gate_history: list[StepRecord]
    retrain_history: list[StepRecord]
    metadata: dict = field(default_factory=dict)


def self_slim(
    model: EncoderModel,
    records: Sequence[TripletRecord],
    config: SlimConfig,
    retrain: TrainConfig,
    callbacks: Optional[Sequence[TrainingCallback]] = None,
) -> SlimOutcome:
    """Gate training, global ranking, masked retraining, then physical shrinking.

    The input model is not modified.
    """
    gated = install_gates(model.copy())
    gate_result = SlimmingTrainer(config, callbacks).train(gated, records)
    mask = global_prune(SlimState.from_model(gated), config.prune_ratio)
    apply_mask(gated, mask)
    retrained = RetrievalTrainer(retrain, callbacks).train(gated, records, phase="slim_retrain")
    slim = shrink(retrained.model, mask)
    return SlimOutcome(
        model=slim,
        mask=mask,
        gate_history=gate_result.history,
        retrain_history=retrained.history,
        metadata={
            "gate_steps": len(gate_result.history),
            "mask_zeros": mask.zeros,
            "mask_total": mask.total,
            "retrain": retrained.metadata,
        },
    )
