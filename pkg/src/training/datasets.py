"""Training triplets and evaluation corpora on disk.

Triplets are JSON lines with ``query``, ``positive``, ``negatives`` and an
optional ``teacher_scores`` list. An evaluation corpus is a directory of three
tab-separated files: ``queries.tsv`` and ``corpus.tsv`` (id, space-separated
token ids) and ``qrels.tsv`` (query id, doc id, grade).
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from pydantic import BaseModel, model_validator

from src.core.errors import ContractError
from src.core.tokenizer import WhitespaceTokenizer, format_tokens, parse_tokens
from src.evaluation.metrics import EvalCorpus
from src.utils.logger import get_logger

logger = get_logger(__name__)

QUERIES_FILE = "queries.tsv"
CORPUS_FILE = "corpus.tsv"
QRELS_FILE = "qrels.tsv"


class TripletRecord(BaseModel):
    query: list[int]
    positive: list[int]
    negatives: list[list[int]] = []
    teacher_scores: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check_teacher(self) -> "TripletRecord":
        if self.teacher_scores is not None and len(self.teacher_scores) != 1 + len(self.negatives):
            raise ValueError(
                f"teacher_scores has {len(self.teacher_scores)} entries, expected {1 + len(self.negatives)}"
            )
        return self


@dataclass
class TripletBatch:
    queries: list[list[int]]
    positives: list[list[int]]
    negatives: list[list[list[int]]]
    teacher_scores: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        size = len(self.queries)
        if size == 0:
            raise ContractError("empty triplet batch")
        if len(self.positives) != size or len(self.negatives) != size:
            raise ContractError(
                f"batch parts disagree: {size} queries, {len(self.positives)} positives, "
                f"{len(self.negatives)} negative lists"
            )
        if len({len(negs) for negs in self.negatives}) != 1:
            raise ContractError("every item in a batch needs the same number of negatives")
        if self.teacher_scores is not None:
            expected = (size, 1 + self.num_negatives)
            if self.teacher_scores.shape != expected:
                raise ContractError(f"teacher_scores shape {self.teacher_scores.shape} != {expected}")

    @property
    def size(self) -> int:
        return len(self.queries)

    @property
    def num_negatives(self) -> int:
        return len(self.negatives[0])

    @classmethod
    def from_records(cls, records: Sequence[TripletRecord]) -> "TripletBatch":
        with_scores = [r.teacher_scores is not None for r in records]
        teacher = None
        if records and all(with_scores):
            teacher = np.asarray([r.teacher_scores for r in records], dtype=np.float64)
        return cls(
            queries=[r.query for r in records],
            positives=[r.positive for r in records],
            negatives=[r.negatives for r in records],
            teacher_scores=teacher,
        )


def iter_batches(
    records: Sequence[TripletRecord],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
) -> Iterator[TripletBatch]:
    """Consecutive batches; shuffled when ``rng`` is given. The last batch may be short."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(records))
    if rng is not None:
        order = rng.permutation(len(records))
    for start in range(0, len(order), batch_size):
        yield TripletBatch.from_records([records[i] for i in order[start : start + batch_size]])


def save_triplets(path: Path, records: Sequence[TripletRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.model_dump(exclude_none=True)) + "\n")
    logger.info("triplets_saved", path=str(path), records=len(records))


def load_triplets(path: Path) -> list[TripletRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(TripletRecord.model_validate(json.loads(line)))
            except ValueError as e:
                raise ContractError(f"{path}:{line_no}: invalid triplet record: {e}") from e
    if not records:
        raise ContractError(f"{path} holds no triplets")
    return records


def _read_tsv(path: Path, columns: int) -> list[list[str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != columns:
                raise ContractError(f"{path}:{line_no}: expected {columns} tab-separated fields")
            rows.append(parts)
    return rows


def save_corpus(directory: Path, corpus: EvalCorpus) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / QUERIES_FILE, "w", encoding="utf-8") as f:
        for qid, tokens in corpus.queries.items():
            f.write(f"{qid}\t{format_tokens(tokens)}\n")
    with open(directory / CORPUS_FILE, "w", encoding="utf-8") as f:
        for doc_id, tokens in corpus.documents.items():
            f.write(f"{doc_id}\t{format_tokens(tokens)}\n")
    with open(directory / QRELS_FILE, "w", encoding="utf-8") as f:
        for qid, judged in corpus.qrels.items():
            for doc_id, grade in judged.items():
                f.write(f"{qid}\t{doc_id}\t{int(grade)}\n")
    logger.info("corpus_saved", path=str(directory), queries=len(corpus.queries), docs=len(corpus.documents))


def load_corpus(directory: Path, vocab_size: Optional[int] = None) -> EvalCorpus:
    """Read a corpus directory; token ids are checked against ``vocab_size`` when given."""
    directory = Path(directory)
    parse = WhitespaceTokenizer(vocab_size).encode if vocab_size is not None else parse_tokens
    queries = {qid: parse(text) for qid, text in _read_tsv(directory / QUERIES_FILE, 2)}
    documents = {doc_id: parse(text) for doc_id, text in _read_tsv(directory / CORPUS_FILE, 2)}
    qrels: dict[str, dict[str, int]] = {}
    for qid, doc_id, grade in _read_tsv(directory / QRELS_FILE, 3):
        qrels.setdefault(qid, {})[doc_id] = int(grade)
    return EvalCorpus(queries=queries, documents=documents, qrels=qrels)
