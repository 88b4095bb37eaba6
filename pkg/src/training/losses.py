"""Contrastive and distillation objectives over L2-normalized embeddings.

Candidates for a batch of ``B`` queries are laid out as one matrix: rows
``0..B-1`` are the positives, then ``K`` explicit negatives per item
(item ``b`` owns rows ``B + b*K .. B + b*K + K - 1``).
"""
from typing import Optional

import numpy as np

from src.core.errors import ContractError, DimensionError
from src.core.tensor import (
    Tensor,
    _log_softmax_np,
    _softmax_np,
    concat,
    log_softmax,
    masked_fill,
    matmul,
    mul,
    pick,
    scale,
)
from src.core.tensor import sum as tensor_sum


def _check_embeddings(q_emb: Tensor, pos_emb: Tensor, neg_embs: Optional[Tensor]) -> int:
    if q_emb.ndim != 2 or pos_emb.shape != q_emb.shape:
        raise DimensionError(f"query embeddings {q_emb.shape} and positive embeddings {pos_emb.shape} must match")
    if neg_embs is None:
        return 0
    batch, dim = q_emb.shape
    if neg_embs.ndim != 2 or neg_embs.shape[1] != dim or neg_embs.shape[0] % batch:
        raise DimensionError(
            f"negative embeddings {neg_embs.shape} do not fit {batch} queries of dimension {dim}"
        )
    return neg_embs.shape[0] // batch


def own_candidate_columns(batch: int, num_negatives: int) -> np.ndarray:
    """Column indices of each item's positive followed by its explicit negatives, shape (B, 1+K)."""
    cols = np.empty((batch, 1 + num_negatives), dtype=np.int64)
    cols[:, 0] = np.arange(batch)
    cols[:, 1:] = batch + np.arange(batch)[:, None] * num_negatives + np.arange(num_negatives)[None, :]
    return cols


def similarity_matrix(q_emb: Tensor, pos_emb: Tensor, neg_embs: Optional[Tensor] = None) -> Tensor:
    _check_embeddings(q_emb, pos_emb, neg_embs)
    candidates = pos_emb if neg_embs is None else concat([pos_emb, neg_embs], axis=0)
    return matmul(q_emb, candidates.T)


def candidate_scores(q_emb: Tensor, pos_emb: Tensor, neg_embs: Optional[Tensor] = None) -> Tensor:
    """Per-item similarities to its own positive and negatives, shape (B, 1+K)."""
    num_negatives = _check_embeddings(q_emb, pos_emb, neg_embs)
    sims = similarity_matrix(q_emb, pos_emb, neg_embs)
    batch = q_emb.shape[0]
    cols = own_candidate_columns(batch, num_negatives)
    rows = np.repeat(np.arange(batch), 1 + num_negatives)
    return pick(sims, rows, cols.reshape(-1)).reshape(batch, 1 + num_negatives)


def infonce_loss(
    q_emb: Tensor,
    pos_emb: Tensor,
    neg_embs: Optional[Tensor] = None,
    in_batch: bool = True,
    tau: float = 0.02,
) -> Tensor:
    """Mean ``-log softmax`` of each positive logit among its candidate pool.

    With ``in_batch`` the pool holds every positive and negative in the batch;
    otherwise only the item's own positive and explicit negatives.
    """
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    num_negatives = _check_embeddings(q_emb, pos_emb, neg_embs)
    batch = q_emb.shape[0]

    logits = scale(similarity_matrix(q_emb, pos_emb, neg_embs), 1.0 / tau)
    if not in_batch:
        own = np.zeros(logits.shape, dtype=bool)
        own[np.repeat(np.arange(batch), 1 + num_negatives), own_candidate_columns(batch, num_negatives).reshape(-1)] = True
        logits = masked_fill(logits, ~own, -np.inf)

    log_probs = log_softmax(logits, axis=-1)
    positives = pick(log_probs, np.arange(batch), np.arange(batch))
    return scale(tensor_sum(positives), -1.0 / batch)


def distill_kl(student_scores: Tensor, teacher_scores: np.ndarray, tau: float = 0.02) -> Tensor:
    """``KL(softmax(teacher/tau) || softmax(student/tau))`` averaged over the batch."""
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    teacher = np.asarray(teacher_scores, dtype=np.float64)
    if student_scores.ndim != 2 or teacher.shape != student_scores.shape:
        raise DimensionError(f"student scores {student_scores.shape} and teacher scores {teacher.shape} must match")

    batch = teacher.shape[0]
    target = _softmax_np(teacher / tau, axis=-1)
    log_target = _log_softmax_np(teacher / tau, axis=-1)
    entropy_term = float(np.sum(np.where(target > 0, target * log_target, 0.0))) / batch

    weights = Tensor(target, dtype=student_scores.dtype)
    cross = tensor_sum(mul(weights, log_softmax(scale(student_scores, 1.0 / tau), axis=-1)))
    return scale(cross, -1.0 / batch) + entropy_term
