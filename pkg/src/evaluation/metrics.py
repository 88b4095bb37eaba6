import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from src.core.errors import ContractError
from src.utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_CUTOFF: int = 10
RUN_TAG: str = "effirlab"


@dataclass
class EvalCorpus:
    queries: dict[str, list[int]]
    documents: dict[str, list[int]]
    qrels: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.queries:
            raise ContractError("evaluation corpus has no queries")
        for qid, judged in self.qrels.items():
            if qid not in self.queries:
                raise ContractError(f"qrels reference unknown query id {qid!r}")
            for doc_id in judged:
                if doc_id not in self.documents:
                    raise ContractError(f"qrels for {qid!r} reference unknown doc id {doc_id!r}")


@dataclass
class RunResult:
    """Ranked documents per query, best first."""

    rankings: dict[str, list[tuple[str, float]]]
    k: int
    tag: str = RUN_TAG

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ContractError(f"cutoff k must be >= 1, got {self.k}")
        for qid, ranked in self.rankings.items():
            doc_ids = [doc_id for doc_id, _ in ranked]
            if len(set(doc_ids)) != len(doc_ids):
                raise ContractError(f"duplicate document in ranking for query {qid!r}")
            scores = [score for _, score in ranked]
            if any(later > earlier for earlier, later in zip(scores, scores[1:])):
                raise ContractError(f"scores increase within ranking for query {qid!r}")

    def top(self, qid: str) -> list[str]:
        return [doc_id for doc_id, _ in self.rankings.get(qid, [])]


def _dcg(gains: list[float]) -> float:
    return sum((2.0**rel - 1.0) / math.log2(rank + 2) for rank, rel in enumerate(gains))


def per_query_ndcg(
    run: RunResult,
    qrels: Mapping[str, Mapping[str, int]],
    k: int = DEFAULT_CUTOFF,
) -> dict[str, float]:
    """nDCG@k for every query with at least one positive judgment.

    Queries with empty or all-zero qrels are left out; a judged query that the
    run never ranked scores 0.
    """
    if k < 1:
        raise ContractError(f"cutoff k must be >= 1, got {k}")
    scores: dict[str, float] = {}
    for qid in sorted(qrels):
        judged = qrels[qid]
        ideal = sorted((rel for rel in judged.values() if rel > 0), reverse=True)[:k]
        if not ideal:
            continue
        gains = [float(judged.get(doc_id, 0)) for doc_id in run.top(qid)[:k]]
        scores[qid] = _dcg(gains) / _dcg(ideal)
    return scores


def ndcg_at_k(run: RunResult, qrels: Mapping[str, Mapping[str, int]], k: int = DEFAULT_CUTOFF) -> float:
    scores = per_query_ndcg(run, qrels, k)
    if not scores:
        raise ContractError("no query has relevance judgments")
    return sum(scores.values()) / len(scores)


def write_trec_run(path: Path, run: RunResult) -> None:
    """TREC layout: ``qid Q0 docid rank score tag`` with 1-based ranks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for qid in sorted(run.rankings):
        for rank, (doc_id, score) in enumerate(run.rankings[qid], start=1):
            lines.append(f"{qid} Q0 {doc_id} {rank} {float(score)!r} {run.tag}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    logger.info("trec_run_written", path=str(path), queries=len(run.rankings))


def read_trec_run(path: Path, k: Optional[int] = None) -> RunResult:
    rankings: dict[str, list[tuple[int, str, float]]] = {}
    tag = RUN_TAG
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ContractError(f"{path}:{line_no}: expected 6 columns, got {len(parts)}")
            qid, _, doc_id, rank, score, tag = parts
            rankings.setdefault(qid, []).append((int(rank), doc_id, float(score)))
    ordered = {
        qid: [(doc_id, score) for _, doc_id, score in sorted(entries)] for qid, entries in rankings.items()
    }
    longest = max((len(entries) for entries in ordered.values()), default=1)
    return RunResult(rankings=ordered, k=k or longest, tag=tag)
