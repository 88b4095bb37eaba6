import hashlib
import json
import platform
from datetime import datetime
from pathlib import Path
from threading import RLock
from typing import Any, Optional

import numpy as np

from src.utils.logger import get_logger

logger = get_logger(__name__)

LEDGER_FILE: str = "ledger.jsonl"
HASH_LENGTH: int = 16


def config_hash(config: Any) -> str:
    """Short sha256 of the canonical JSON form of ``config``."""
    if hasattr(config, "model_dump"):
        config = config.model_dump(mode="json")
    payload = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:HASH_LENGTH]


def versions() -> dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__}


class RunLedger:
    """Append-only JSON-lines record of every stage run."""

    def __init__(self, runs_path: str = "./runs", max_entries: int = 10_000):
        self.runs_path = Path(runs_path)
        self.runs_path.mkdir(parents=True, exist_ok=True)
        self.ledger_file = self.runs_path / LEDGER_FILE
        self.max_entries = max(1, max_entries)
        self._lock = RLock()

    def record(
        self,
        stage: str,
        config_digest: str,
        seed: int,
        outputs: Optional[dict] = None,
        metrics: Optional[dict] = None,
    ) -> dict:
        entry = {
            "timestamp": datetime.now().isoformat(),
            "stage": stage,
            "config_hash": config_digest,
            "seed": seed,
            "outputs": outputs or {},
            "metrics": metrics or {},
            "versions": versions(),
        }
        try:
            with self._lock:
                with open(self.ledger_file, "a", encoding="utf-8") as f:
                    f.write(json.dumps(entry, sort_keys=True, default=str) + "\n")
                self._trim()
        except OSError as e:
            logger.error("run_ledger_write_failed", stage=stage, error=str(e))
        return entry

    def entries(self, stage: Optional[str] = None) -> list[dict]:
        if not self.ledger_file.exists():
            return []
        try:
            with self._lock:
                with open(self.ledger_file, "r", encoding="utf-8") as f:
                    history = [json.loads(line) for line in f if line.strip()]
        except (OSError, json.JSONDecodeError) as e:
            logger.error("run_ledger_read_failed", error=str(e))
            return []
        if stage is not None:
            history = [entry for entry in history if entry.get("stage") == stage]
        return history

    def _trim(self) -> None:
        with open(self.ledger_file, "r", encoding="utf-8") as f:
            lines = [line for line in f if line.strip()]
        if len(lines) <= self.max_entries:
            return
        with open(self.ledger_file, "w", encoding="utf-8") as f:
            f.writelines(lines[-self.max_entries :])
