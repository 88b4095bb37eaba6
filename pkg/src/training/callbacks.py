from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from src.core.config import TrainDefaults, settings
from src.utils.logger import get_logger
from src.utils.metrics import TRAIN_LOSS, TRAIN_STEPS

logger = get_logger(__name__)

LOSS_WINDOW: int = 20


@dataclass
class StepRecord:
    phase: str
    step: int
    epoch: int
    lr: float
    terms: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.terms["total"]


class TrainingCallback:
    def on_train_start(self, phase: str, total_steps: int) -> None:
        pass

    def on_step(self, record: StepRecord) -> None:
        pass

    def on_train_end(self, phase: str) -> None:
        pass

    def on_train_abort(self, phase: str, error: BaseException) -> None:
        pass


class LossLoggingCallback(TrainingCallback):
    def __init__(self, log_freq: int = TrainDefaults.LOG_FREQ):
        self.log_freq = max(1, log_freq)
        self.totals: list[float] = []

    def on_train_start(self, phase: str, total_steps: int) -> None:
        self.totals = []
        logger.info("training_started", phase=phase, total_steps=total_steps)

    def on_step(self, record: StepRecord) -> None:
        self.totals.append(record.total)
        if (record.step + 1) % self.log_freq == 0:
            logger.info(
                "training_progress",
                phase=record.phase,
                step=record.step + 1,
                epoch=record.epoch,
                lr=record.lr,
                mean_loss=float(np.mean(self.totals[-LOSS_WINDOW:])),
                **record.terms,
            )

    def on_train_end(self, phase: str) -> None:
        logger.info(
            "training_completed",
            phase=phase,
            steps=len(self.totals),
            final_loss=self.totals[-1] if self.totals else None,
        )

    def on_train_abort(self, phase: str, error: BaseException) -> None:
        logger.warning("training_aborted", phase=phase, steps=len(self.totals), error=str(error))


class TrainingMetricsCallback(TrainingCallback):
    def on_step(self, record: StepRecord) -> None:
        TRAIN_STEPS.labels(phase=record.phase).inc()
        for term, value in record.terms.items():
            TRAIN_LOSS.labels(phase=record.phase, term=term).set(value)


class TensorBoardCallback(TrainingCallback):
    def __init__(self, log_dir: Path):
        self.log_dir = Path(log_dir)
        self._writer = None

    def on_train_start(self, phase: str, total_steps: int) -> None:
        from torch.utils.tensorboard import SummaryWriter

        self._writer = SummaryWriter(log_dir=str(self.log_dir / phase))

    def on_step(self, record: StepRecord) -> None:
        if self._writer is None:
            return
        for term, value in record.terms.items():
            self._writer.add_scalar(f"{record.phase}/{term}", value, record.step)
        self._writer.add_scalar(f"{record.phase}/lr", record.lr, record.step)

    def on_train_end(self, phase: str) -> None:
        if self._writer is not None:
            self._writer.close()
            self._writer = None

    def on_train_abort(self, phase: str, error: BaseException) -> None:
        self.on_train_end(phase)


def get_training_callbacks(
    log_freq: int = TrainDefaults.LOG_FREQ,
    tensorboard_dir: Optional[Path] = None,
) -> list[TrainingCallback]:
    callbacks: list[TrainingCallback] = [LossLoggingCallback(log_freq=log_freq)]
    if settings.METRICS_ENABLED:
        callbacks.append(TrainingMetricsCallback())
    if tensorboard_dir is not None and settings.TENSORBOARD_ENABLED:
        callbacks.append(TensorBoardCallback(tensorboard_dir))
    return callbacks
