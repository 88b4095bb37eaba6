from pathlib import Path

from src.core.config import Settings
from src.core.errors import CheckpointError
from src.inference.checkpoint import MANIFEST_FILE, Checkpoint, load_checkpoint
from src.utils.logger import get_logger

logger = get_logger(__name__)


class ModelLoader:
    """Resolves checkpoint names against ``MODEL_PATH`` and caches loaded checkpoints."""

    def __init__(self, config: Settings):
        self.config = config
        self.model_path = Path(config.MODEL_PATH)
        self.checkpoints: dict[str, Checkpoint] = {}

    def resolve(self, name: str) -> Path:
        path = Path(name)
        if (path / MANIFEST_FILE).exists():
            return path
        candidate = self.model_path / name
        if (candidate / MANIFEST_FILE).exists():
            return candidate
        logger.error("model_not_found", name=name, model_path=str(self.model_path))
        raise CheckpointError(f"no checkpoint at {path} or {candidate}")

    def load_model(self, name: str) -> Checkpoint:
        path = self.resolve(name)
        key = str(path.resolve())
        if key in self.checkpoints:
            return self.checkpoints[key]
        checkpoint = load_checkpoint(path)
        self.checkpoints[key] = checkpoint
        return checkpoint
