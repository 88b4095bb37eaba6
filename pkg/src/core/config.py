from pydantic_settings import BaseSettings, SettingsConfigDict


class CalibrationDefaults:
    SAMPLES: int = 256
    SEQ_LEN: int = 64


class SlimDefaults:
    LAMBDA: float = 1e-8
    BETA: float = 5.0
    STEPS: int = 500
    PRUNE_RATIO: float = 0.30
    LEARNING_RATE: float = 1e-3


class TrainDefaults:
    TAU: float = 0.02
    LEARNING_RATE: float = 1e-4
    EPOCHS: int = 1
    BATCH_SIZE: int = 8
    NEGATIVES: int = 7
    WARMUP_STEPS: int = 10
    DISTILL_WEIGHT: float = 1.0
    ADAM_BETA1: float = 0.9
    ADAM_BETA2: float = 0.999
    ADAM_EPS: float = 1e-8
    LORA_RANK: int = 32
    LORA_ALPHA: float = 64.0
    LOG_FREQ: int = 10


class BenchDefaults:
    REPETITIONS: int = 20
    WARMUP: int = 3
    INPUTS: int = 32
    QUERY_LEN: int = 16
    DOC_LEN: int = 96
    SPEEDUP_TOLERANCE: float = 0.10


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="EFFIRLAB_", env_file=".env", extra="ignore")

    MODEL_PATH: str = "./models"
    RUNS_PATH: str = "./runs"

    THREADS: int = 1

    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = True
    METRICS_ENABLED: bool = True
    TENSORBOARD_ENABLED: bool = False


settings = Settings()
