from typing import Sequence

import numpy as np
from pydantic import BaseModel

from src.core.encoder import EncoderModel
from src.core.errors import ContractError
from src.core.tensor import no_grad
from src.utils.logger import get_logger

logger = get_logger(__name__)


class SimilarityTrace(BaseModel):
    """Query-document cosine at every block boundary; index 0 is the embedding layer."""

    doc_index: int
    cosines: list[float]


def _pooled_states(model: EncoderModel, tokens: Sequence[int]) -> np.ndarray:
    with no_grad():
        states = model.hidden_states(model.prepare(tokens))
        pooled = np.stack([model.pool(state).data.astype(np.float64) for state in states])
    norms = np.linalg.norm(pooled, axis=-1, keepdims=True)
    return pooled / np.maximum(norms, 1e-12)


def layerwise_similarity(
    model: EncoderModel,
    query: Sequence[int],
    docs: Sequence[Sequence[int]],
) -> list[SimilarityTrace]:
    if not docs:
        raise ContractError("layerwise_similarity needs at least one document")
    q = _pooled_states(model, query)
    traces = []
    for index, doc in enumerate(docs):
        d = _pooled_states(model, doc)
        traces.append(SimilarityTrace(doc_index=index, cosines=np.einsum("ld,ld->l", q, d).tolist()))
    return traces


def isotropy(embeddings: np.ndarray) -> float:
    """Mean cosine over distinct pairs; lower means a more uniformly spread space."""
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ContractError(f"isotropy needs at least two embeddings, got shape {embeddings.shape}")
    x = embeddings.astype(np.float64)
    x = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    n = x.shape[0]
    total = float(np.square(x.sum(axis=0)).sum())
    return (total - float(np.einsum("ij,ij->", x, x))) / (n * (n - 1))
