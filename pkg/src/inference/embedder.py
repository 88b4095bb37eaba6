from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from src.core.config import settings
from src.core.encoder import EncoderModel, encode
from src.core.tensor import no_grad
from src.utils.logger import get_logger
from src.utils.metrics import SEQUENCES_ENCODED

logger = get_logger(__name__)


class BatchEncoder:
    """Encodes token sequences with a shared read-only model.

    Work is spread over ``threads`` workers; rows come back in input order.
    """

    def __init__(self, model: EncoderModel, threads: Optional[int] = None):
        self.model = model
        self.threads = max(1, threads if threads is not None else settings.THREADS)

    def _encode_one(self, tokens: Sequence[int]) -> np.ndarray:
        with no_grad():
            return encode(self.model, tokens).data

    def encode(self, sequences: Sequence[Sequence[int]], side: str = "doc") -> np.ndarray:
        if not sequences:
            return np.zeros((0, self.model.config.d_model), dtype=self.model.dtype)
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                rows = list(pool.map(self._encode_one, sequences))
        else:
            rows = [self._encode_one(tokens) for tokens in sequences]
        SEQUENCES_ENCODED.labels(side=side).inc(len(rows))
        return np.stack(rows)
