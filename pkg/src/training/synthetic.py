"""Shared-keyword retrieval task.

Token ids ``1 .. n_keywords`` are keywords, the rest of the vocabulary (minus
<eos>) is filler. Every document carries a unique keyword set hidden among
filler; a query repeats its positive document's keywords with fresh filler.
Relevance is therefore decidable by keyword overlap alone.
"""
from dataclasses import dataclass
from itertools import combinations
from typing import Protocol, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.core.errors import ContractError
from src.evaluation.metrics import EvalCorpus
from src.training.datasets import TripletRecord
from src.utils.logger import get_logger

logger = get_logger(__name__)


class SyntheticTask(BaseModel):
    vocab_size: int = Field(default=512, ge=4)
    n_docs: int = Field(default=2000, ge=2, description="Corpus size")
    n_train_queries: int = Field(default=1000, ge=1)
    n_eval_queries: int = Field(default=100, ge=1)
    query_len: int = Field(default=8, ge=1)
    doc_len: int = Field(default=24, ge=1)
    n_keywords: int = Field(default=128, ge=2, description="Size of the keyword id range")
    keywords_per_doc: int = Field(default=2, ge=1)
    n_negatives: int = Field(default=7, ge=0)
    teacher_scores: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "SyntheticTask":
        if self.n_keywords + 1 >= self.vocab_size:
            raise ValueError(f"n_keywords={self.n_keywords} leaves no filler tokens in vocab_size={self.vocab_size}")
        if self.keywords_per_doc > min(self.query_len, self.doc_len):
            raise ValueError("keywords_per_doc exceeds query_len or doc_len")
        return self

    @property
    def keyword_ids(self) -> range:
        return range(1, self.n_keywords + 1)

    @property
    def filler_ids(self) -> range:
        return range(self.n_keywords + 1, self.vocab_size)


@dataclass
class SyntheticDataset:
    train: list[TripletRecord]
    eval: EvalCorpus
    doc_keywords: dict[str, frozenset[int]]


class Scorer(Protocol):
    def __call__(self, query: Sequence[int], doc: Sequence[int]) -> float: ...


class KeywordOverlapScorer:
    """Counts distinct keyword tokens shared by query and document."""

    def __init__(self, keyword_ids: Sequence[int]):
        self.keyword_ids = frozenset(int(k) for k in keyword_ids)

    def __call__(self, query: Sequence[int], doc: Sequence[int]) -> float:
        return float(len(self.keyword_ids.intersection(query).intersection(doc)))

    @classmethod
    def for_task(cls, task: SyntheticTask) -> "KeywordOverlapScorer":
        return cls(task.keyword_ids)


def _keyword_sets(task: SyntheticTask, rng: np.random.Generator) -> list[tuple[int, ...]]:
    pool = list(combinations(task.keyword_ids, task.keywords_per_doc))
    if len(pool) < task.n_docs:
        raise ContractError(
            f"{task.n_keywords} keywords give only {len(pool)} distinct keyword sets for {task.n_docs} documents"
        )
    picked = rng.choice(len(pool), size=task.n_docs, replace=False)
    return [pool[i] for i in picked]


def _hide(keywords: Sequence[int], length: int, filler: range, rng: np.random.Generator) -> list[int]:
    tokens = rng.integers(filler.start, filler.stop, size=length)
    slots = rng.choice(length, size=len(keywords), replace=False)
    tokens[slots] = keywords
    return tokens.tolist()


def generate_synthetic(task: SyntheticTask) -> SyntheticDataset:
    if task.n_eval_queries >= task.n_docs:
        raise ContractError(f"n_eval_queries={task.n_eval_queries} needs more than n_docs={task.n_docs} documents")
    rng = np.random.default_rng(task.seed)
    keyword_sets = _keyword_sets(task, rng)
    docs = [_hide(kws, task.doc_len, task.filler_ids, rng) for kws in keyword_sets]
    doc_ids = [f"d{i}" for i in range(task.n_docs)]

    # Documents sharing no keyword with document i are valid negatives for its queries.
    keyword_matrix = np.zeros((task.n_docs, task.n_keywords + 1), dtype=bool)
    for i, kws in enumerate(keyword_sets):
        keyword_matrix[i, list(kws)] = True
    overlap = keyword_matrix.astype(np.int32) @ keyword_matrix.T.astype(np.int32)

    targets = rng.permutation(task.n_docs)
    eval_targets = targets[: task.n_eval_queries]
    train_pool = targets[task.n_eval_queries :]
    train_targets = train_pool[np.arange(task.n_train_queries) % len(train_pool)]

    scorer = KeywordOverlapScorer.for_task(task)
    train: list[TripletRecord] = []
    for target in train_targets:
        query = _hide(keyword_sets[target], task.query_len, task.filler_ids, rng)
        candidates = np.flatnonzero(overlap[target] == 0)
        if len(candidates) < task.n_negatives:
            raise ContractError(
                f"document {target} has {len(candidates)} keyword-disjoint documents, "
                f"fewer than n_negatives={task.n_negatives}"
            )
        picked = rng.choice(candidates, size=task.n_negatives, replace=False)
        negatives = [docs[j] for j in picked]
        teacher = None
        if task.teacher_scores:
            teacher = [scorer(query, doc) for doc in [docs[target], *negatives]]
        train.append(TripletRecord(query=query, positive=docs[target], negatives=negatives, teacher_scores=teacher))

    queries = {}
    qrels = {}
    for n, target in enumerate(eval_targets):
        qid = f"q{n}"
        queries[qid] = _hide(keyword_sets[target], task.query_len, task.filler_ids, rng)
        qrels[qid] = {doc_ids[target]: 1}
    corpus = EvalCorpus(queries=queries, documents=dict(zip(doc_ids, docs)), qrels=qrels)

    logger.info(
        "synthetic_generated",
        docs=task.n_docs,
        train=len(train),
        eval_queries=len(queries),
        seed=task.seed,
    )
    return SyntheticDataset(
        train=train,
        eval=corpus,
        doc_keywords={doc_ids[i]: frozenset(kws) for i, kws in enumerate(keyword_sets)},
    )


def calibration_sequences(task: SyntheticTask, samples: int, seq_len: int, seed: int = 0) -> list[list[int]]:
    """Document-shaped text drawn fresh from the task's token distribution, never from the training split."""
    if samples < 1 or seq_len < task.keywords_per_doc:
        raise ContractError(f"cannot draw {samples} calibration samples of length {seq_len}")
    rng = np.random.default_rng(seed)
    keywords = np.asarray(task.keyword_ids)
    sequences = []
    for _ in range(samples):
        kws = rng.choice(keywords, size=task.keywords_per_doc, replace=False)
        sequences.append(_hide(kws.tolist(), seq_len, task.filler_ids, rng))
    return sequences
