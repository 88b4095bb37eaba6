import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from src.core.config import TrainDefaults
from src.core.encoder import EncoderModel, encode
from src.core.errors import ContractError, NumericError
from src.core.lora import LORA_TARGETS, attach_lora, merge_lora
from src.core.tensor import Tape, Tensor, scale, stack
from src.training.callbacks import StepRecord, TrainingCallback
from src.training.datasets import TripletBatch, TripletRecord, iter_batches
from src.training.losses import candidate_scores, distill_kl, infonce_loss
from src.training.optim import Adam, warmup_lr
from src.utils.logger import get_logger

logger = get_logger(__name__)

DISTILL_FORM: str = "kl(softmax(teacher/tau) || softmax(student/tau))"


class LoraSettings(BaseModel):
    rank: int = Field(default=TrainDefaults.LORA_RANK, ge=1)
    alpha: float = Field(default=TrainDefaults.LORA_ALPHA, gt=0)
    targets: list[str] = Field(default_factory=lambda: list(LORA_TARGETS))
    merge: bool = True


class TrainConfig(BaseModel):
    tau: float = Field(default=TrainDefaults.TAU, gt=0)
    learning_rate: float = Field(default=TrainDefaults.LEARNING_RATE, ge=0)
    epochs: int = Field(default=TrainDefaults.EPOCHS, ge=1)
    batch_size: int = Field(default=TrainDefaults.BATCH_SIZE, ge=1)
    use_in_batch_negatives: bool = True
    distill_weight: float = Field(default=TrainDefaults.DISTILL_WEIGHT, ge=0)
    warmup_steps: int = Field(default=TrainDefaults.WARMUP_STEPS, ge=0)
    max_steps: Optional[int] = Field(default=None, ge=1)
    lora: Optional[LoraSettings] = None
    seed: int = 0
    log_freq: int = Field(default=TrainDefaults.LOG_FREQ, ge=1)


@dataclass
class LossTerms:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), **self.components}


@dataclass
class TrainResult:
    model: EncoderModel
    history: list[StepRecord]
    metadata: dict = field(default_factory=dict)

    @property
    def loss_curve(self) -> list[float]:
        return [record.total for record in self.history]


LossFn = Callable[[EncoderModel, TripletBatch], LossTerms]


def encode_batch(model: EncoderModel, sequences: Sequence[Sequence[int]]) -> Tensor:
    return stack([encode(model, tokens) for tokens in sequences], axis=0)


def retrieval_loss(
    model: EncoderModel,
    batch: TripletBatch,
    tau: float = TrainDefaults.TAU,
    in_batch: bool = True,
    distill_weight: float = TrainDefaults.DISTILL_WEIGHT,
) -> LossTerms:
    q_emb = encode_batch(model, batch.queries)
    pos_emb = encode_batch(model, batch.positives)
    neg_emb = None
    if batch.num_negatives:
        neg_emb = encode_batch(model, [doc for negatives in batch.negatives for doc in negatives])

    contrastive = infonce_loss(q_emb, pos_emb, neg_emb, in_batch=in_batch, tau=tau)
    components = {"infonce": contrastive.item()}
    total = contrastive
    if batch.teacher_scores is not None and distill_weight > 0:
        kl = distill_kl(candidate_scores(q_emb, pos_emb, neg_emb), batch.teacher_scores, tau=tau)
        components["distill"] = kl.item()
        total = total + scale(kl, distill_weight)
    return LossTerms(total=total, components=components)


def run_training_loop(
    model: EncoderModel,
    records: Sequence[TripletRecord],
    params: Sequence[Tensor],
    loss_fn: LossFn,
    *,
    phase: str,
    learning_rate: float,
    batch_size: int,
    epochs: Optional[int],
    max_steps: Optional[int] = None,
    warmup_steps: int = 0,
    seed: int = 0,
    callbacks: Sequence[TrainingCallback] = (),
) -> list[StepRecord]:
    """Adam over ``params`` on shuffled batches of ``records``.

    Runs ``epochs`` passes, or cycles until ``max_steps`` when ``epochs`` is
    None. A non-finite loss aborts the run before any update is applied.
    """
    if not records:
        raise ContractError("training dataset is empty")
    if epochs is None and max_steps is None:
        raise ContractError("either epochs or max_steps must bound the run")

    steps_per_epoch = math.ceil(len(records) / batch_size)
    total_steps = steps_per_epoch * epochs if epochs is not None else max_steps
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    optimizer = Adam(params, lr=learning_rate)
    optimizer.zero_grad()
    rng = np.random.default_rng(seed)
    history: list[StepRecord] = []
    for callback in callbacks:
        callback.on_train_start(phase, total_steps)

    step = 0
    epoch = 0
    try:
        while step < total_steps:
            for batch in iter_batches(records, batch_size, rng):
                if step >= total_steps:
                    break
                lr = warmup_lr(learning_rate, step, warmup_steps)
                with Tape() as tape:
                    terms = loss_fn(model, batch)
                    values = terms.as_dict()
                    if not all(math.isfinite(v) for v in values.values()):
                        logger.error("training_diverged", phase=phase, step=step, epoch=epoch, **values)
                        raise NumericError(f"{phase}: non-finite loss at step {step} (epoch {epoch}): {values}")
                    tape.backward(terms.total)
                optimizer.step(lr)
                optimizer.zero_grad()

                record = StepRecord(phase=phase, step=step, epoch=epoch, lr=lr, terms=values)
                history.append(record)
                for callback in callbacks:
                    callback.on_step(record)
                step += 1
            epoch += 1
    except Exception as e:
        for callback in callbacks:
            callback.on_train_abort(phase, e)
        raise

    for callback in callbacks:
        callback.on_train_end(phase)
    return history


class RetrievalTrainer:
    def __init__(self, config: TrainConfig, callbacks: Optional[Sequence[TrainingCallback]] = None):
        self.config = config
        self.callbacks = list(callbacks or [])

    def loss(self, model: EncoderModel, batch: TripletBatch) -> LossTerms:
        return retrieval_loss(
            model,
            batch,
            tau=self.config.tau,
            in_batch=self.config.use_in_batch_negatives,
            distill_weight=self.config.distill_weight,
        )

    def train(self, model: EncoderModel, records: Sequence[TripletRecord], phase: str = "train") -> TrainResult:
        """Train a copy of ``model``; the input model is left untouched."""
        config = self.config
        model = model.copy()
        if config.lora is not None:
            model.freeze()
            attach_lora(model, config.lora.targets, rank=config.lora.rank, alpha=config.lora.alpha, seed=config.seed)
        else:
            model.unfreeze()
        params = model.trainable_parameters()

        history = run_training_loop(
            model,
            records,
            params,
            self.loss,
            phase=phase,
            learning_rate=config.learning_rate,
            batch_size=config.batch_size,
            epochs=config.epochs,
            max_steps=config.max_steps,
            warmup_steps=config.warmup_steps,
            seed=config.seed,
            callbacks=self.callbacks,
        )

        if config.lora is not None and config.lora.merge:
            merge_lora(model)

        metadata = {
            "phase": phase,
            "steps": len(history),
            "trainable": "lora" if config.lora is not None else "all",
            "trainable_params": int(sum(p.size for p in params)),
            "optimizer": "adam",
            "distillation": DISTILL_FORM if config.distill_weight > 0 else None,
        }
        return TrainResult(model=model, history=history, metadata=metadata)


def train(
    model: EncoderModel,
    records: Sequence[TripletRecord],
    config: TrainConfig,
    callbacks: Optional[Sequence[TrainingCallback]] = None,
) -> TrainResult:
    return RetrievalTrainer(config, callbacks).train(model, records)
