from typing import Optional, Sequence

import numpy as np

from src.core.encoder import EncoderModel
from src.core.errors import ContractError
from src.evaluation.metrics import RUN_TAG, EvalCorpus, RunResult
from src.inference.embedder import BatchEncoder
from src.training.synthetic import Scorer
from src.utils.logger import get_logger

logger = get_logger(__name__)


def rank_scores(
    scores: np.ndarray,
    query_ids: Sequence[str],
    doc_ids: Sequence[str],
    k: int,
    tag: str = RUN_TAG,
) -> RunResult:
    """Top-``k`` per row of a (queries x docs) score matrix; equal scores rank by doc id ascending."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if scores.shape != (len(query_ids), len(doc_ids)):
        raise ContractError(f"score matrix {scores.shape} does not match {len(query_ids)}x{len(doc_ids)} ids")
    doc_rank = np.empty(len(doc_ids), dtype=np.int64)
    doc_rank[np.argsort(np.asarray(doc_ids, dtype=object), kind="stable")] = np.arange(len(doc_ids))

    rankings = {}
    for row, qid in enumerate(query_ids):
        order = np.lexsort((doc_rank, -scores[row]))[:k]
        rankings[qid] = [(doc_ids[j], float(scores[row, j])) for j in order]
    return RunResult(rankings=rankings, k=k, tag=tag)


def exact_top_k(
    q_emb: np.ndarray,
    d_emb: np.ndarray,
    query_ids: Sequence[str],
    doc_ids: Sequence[str],
    k: int,
) -> RunResult:
    scores = q_emb.astype(np.float64) @ d_emb.astype(np.float64).T
    return rank_scores(scores, query_ids, doc_ids, k)


def _check_corpus(corpus: EvalCorpus, k: int) -> None:
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not corpus.documents:
        raise ContractError("corpus has no documents")


def brute_force_search(
    model: EncoderModel,
    corpus: EvalCorpus,
    k: int = 10,
    threads: Optional[int] = None,
) -> RunResult:
    """Exact cosine top-``k`` over every document."""
    _check_corpus(corpus, k)
    encoder = BatchEncoder(model, threads=threads)
    query_ids = list(corpus.queries)
    doc_ids = list(corpus.documents)
    q_emb = encoder.encode([corpus.queries[q] for q in query_ids], side="query")
    d_emb = encoder.encode([corpus.documents[d] for d in doc_ids], side="doc")
    run = exact_top_k(q_emb, d_emb, query_ids, doc_ids, k)
    logger.info("search_completed", queries=len(query_ids), docs=len(doc_ids), k=k)
    return run


def scorer_search(scorer: Scorer, corpus: EvalCorpus, k: int = 10, tag: str = "oracle") -> RunResult:
    """Rank with an arbitrary (query, doc) scorer, e.g. the keyword-overlap oracle."""
    _check_corpus(corpus, k)
    query_ids = list(corpus.queries)
    doc_ids = list(corpus.documents)
    scores = np.array(
        [[scorer(corpus.queries[q], corpus.documents[d]) for d in doc_ids] for q in query_ids],
        dtype=np.float64,
    )
    return rank_scores(scores, query_ids, doc_ids, k, tag=tag)
