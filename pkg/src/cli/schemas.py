import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.core.config import CalibrationDefaults
from src.core.encoder import EncoderConfig
from src.core.errors import ConfigError
from src.evaluation.bench import Workload
from src.evaluation.metrics import DEFAULT_CUTOFF
from src.services.redundancy import PlanMode
from src.services.slimming import SlimConfig
from src.training.synthetic import SyntheticTask
from src.training.trainer import TrainConfig


class Stage(str, Enum):
    PROFILE = "profile"
    DROP = "drop"
    SLIM = "slim"
    TRAIN = "train"
    EVAL = "eval"
    BENCH = "bench"


REPEATABLE_STAGES: frozenset[Stage] = frozenset({Stage.TRAIN, Stage.EVAL, Stage.BENCH})
STAGE_PREREQUISITES: dict[Stage, Stage] = {Stage.DROP: Stage.PROFILE}


class CalibrationSource(str, Enum):
    TASK = "task"
    RANDOM = "random"


class CalibrationSettings(BaseModel):
    source: CalibrationSource = CalibrationSource.TASK
    samples: int = Field(default=CalibrationDefaults.SAMPLES, ge=1)
    seq_len: int = Field(default=CalibrationDefaults.SEQ_LEN, ge=2)


class DropSettings(BaseModel):
    k_attn: Optional[int] = Field(default=None, ge=0, description="Attention sublayers retained; all when unset")
    k_mlp: Optional[int] = Field(default=None, ge=0, description="MLP sublayers retained; all when unset")
    mode: Optional[PlanMode] = None


class EvalSettings(BaseModel):
    cutoff: int = Field(default=DEFAULT_CUTOFF, ge=1)
    scorer: str = Field(default="model", pattern="^(model|oracle)$")


class ExperimentConfig(BaseModel):
    seed: int = 0
    out: str = "./runs/experiment"
    init_from: Optional[str] = Field(default=None, description="Checkpoint to start from instead of a fresh model")
    stages: list[Stage] = Field(
        default_factory=lambda: [Stage.TRAIN, Stage.PROFILE, Stage.DROP, Stage.SLIM, Stage.EVAL, Stage.BENCH]
    )
    task: SyntheticTask = Field(default_factory=SyntheticTask)
    model: EncoderConfig = Field(default_factory=EncoderConfig)
    calibration: CalibrationSettings = Field(default_factory=CalibrationSettings)
    drop: DropSettings = Field(default_factory=DropSettings)
    slim: SlimConfig = Field(default_factory=SlimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    retrain: Optional[TrainConfig] = Field(default=None, description="Masked retraining inside slim; train settings when unset")
    eval: EvalSettings = Field(default_factory=EvalSettings)
    bench: Workload = Field(default_factory=Workload)

    @field_validator("stages")
    @classmethod
    def _check_stage_order(cls, stages: list[Stage]) -> list[Stage]:
        seen: set[Stage] = set()
        for stage in stages:
            if stage in seen and stage not in REPEATABLE_STAGES:
                raise ValueError(f"stage {stage.value!r} appears more than once")
            required = STAGE_PREREQUISITES.get(stage)
            if required is not None and required not in seen:
                raise ValueError(f"stage {stage.value!r} needs a preceding {required.value!r} stage")
            seen.add(stage)
        return stages

    @model_validator(mode="after")
    def _check_paths_and_lengths(self) -> "ExperimentConfig":
        if self.init_from is not None and not Path(self.init_from).exists():
            raise ValueError(f"init_from checkpoint {self.init_from} does not exist")
        longest = max(self.task.query_len, self.task.doc_len, self.calibration.seq_len, self.bench.doc_len)
        if self.init_from is None and longest + 1 > self.model.max_seq_len:
            raise ValueError(f"sequences of {longest} tokens plus <eos> exceed max_seq_len={self.model.max_seq_len}")
        if self.model.vocab_size < self.task.vocab_size:
            raise ValueError(f"model vocab_size={self.model.vocab_size} is smaller than task vocab_size")
        return self

    @property
    def retrain_config(self) -> TrainConfig:
        return self.retrain or self.train


def stage_seed(root_seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def _set_dotted(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {key} is not a section")
    node[keys[-1]] = value


def load_experiment_config(path: Optional[Path] = None, overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    """Read a JSON config and apply dotted-key overrides; overrides win."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e
