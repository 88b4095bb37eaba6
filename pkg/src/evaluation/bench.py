"""Encoding throughput and search latency timers.

Timings are single-threaded medians; the model and its baseline are timed
alternately within each repetition so both see the same machine state.
"""
import time
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, Field

from src.core.config import BenchDefaults
from src.core.encoder import EncoderModel, count_params, encode
from src.core.errors import ContractError
from src.core.tensor import no_grad
from src.evaluation.metrics import EvalCorpus
from src.evaluation.search import exact_top_k
from src.inference.embedder import BatchEncoder
from src.utils.logger import get_logger
from src.utils.metrics import ENCODE_LATENCY

logger = get_logger(__name__)

BENCH_THREADS: int = 1


class Workload(BaseModel):
    n_inputs: int = Field(default=BenchDefaults.INPUTS, ge=1, description="Sequences per timed pass")
    query_len: int = Field(default=BenchDefaults.QUERY_LEN, ge=1)
    doc_len: int = Field(default=BenchDefaults.DOC_LEN, ge=1)
    repetitions: int = Field(default=BenchDefaults.REPETITIONS, ge=1)
    warmup: int = Field(default=BenchDefaults.WARMUP, ge=1)
    seed: int = 0

    def sequences(self, vocab_size: int, length: int) -> list[list[int]]:
        rng = np.random.default_rng(self.seed)
        return rng.integers(1, vocab_size, size=(self.n_inputs, length)).tolist()


class BenchReport(BaseModel):
    model: str
    baseline: str
    params: int
    baseline_params: int
    batch_size: int
    query_len: int
    doc_len: int
    repetitions: int
    warmup: int
    threads: int = BENCH_THREADS
    query_seconds: float
    doc_seconds: float
    baseline_query_seconds: float
    baseline_doc_seconds: float
    query_tokens_per_sec: float
    doc_tokens_per_sec: float
    query_speedup: float
    doc_speedup: float
    search_ms_per_query: Optional[float] = None


def _encode_all(model: EncoderModel, sequences: list[list[int]]) -> None:
    with no_grad():
        for tokens in sequences:
            encode(model, tokens)


def _median_times(
    runners: dict[str, Callable[[], None]],
    repetitions: int,
    warmup: int,
    side: str,
) -> dict[str, float]:
    for _ in range(warmup):
        for run in runners.values():
            run()
    samples: dict[str, list[float]] = {name: [] for name in runners}
    names = list(runners)
    for rep in range(repetitions):
        for name in names if rep % 2 == 0 else reversed(names):
            start = time.perf_counter()
            runners[name]()
            elapsed = time.perf_counter() - start
            samples[name].append(elapsed)
            ENCODE_LATENCY.labels(model=name, side=side).observe(elapsed)
    return {name: float(np.median(values)) for name, values in samples.items()}


def throughput_bench(
    model: EncoderModel,
    workload: Workload,
    baseline: Optional[EncoderModel] = None,
    model_name: str = "model",
    baseline_name: Optional[str] = None,
) -> BenchReport:
    """Time query-side and doc-side encoding of ``model`` against ``baseline`` (itself by default)."""
    if baseline is None:
        baseline = model
        baseline_name = baseline_name or model_name
    baseline_name = baseline_name or "baseline"
    limit = min(model.config.max_seq_len, baseline.config.max_seq_len)
    if max(workload.query_len, workload.doc_len) + 1 > limit:
        raise ContractError(f"workload sequence length exceeds max_seq_len={limit}")
    vocab = min(model.config.vocab_size, baseline.config.vocab_size)

    names = (model_name, baseline_name) if baseline_name != model_name else (model_name, f"{baseline_name}#baseline")
    timings: dict[str, dict[str, float]] = {}
    for side, length in (("query", workload.query_len), ("doc", workload.doc_len)):
        sequences = workload.sequences(vocab, length)
        timings[side] = _median_times(
            {
                names[0]: lambda: _encode_all(model, sequences),
                names[1]: lambda: _encode_all(baseline, sequences),
            },
            workload.repetitions,
            workload.warmup,
            side,
        )

    def tokens_per_sec(length: int, seconds: float) -> float:
        return workload.n_inputs * (length + 1) / seconds

    query_s, base_query_s = timings["query"][names[0]], timings["query"][names[1]]
    doc_s, base_doc_s = timings["doc"][names[0]], timings["doc"][names[1]]
    report = BenchReport(
        model=model_name,
        baseline=baseline_name,
        params=count_params(model),
        baseline_params=count_params(baseline),
        batch_size=workload.n_inputs,
        query_len=workload.query_len,
        doc_len=workload.doc_len,
        repetitions=workload.repetitions,
        warmup=workload.warmup,
        query_seconds=query_s,
        doc_seconds=doc_s,
        baseline_query_seconds=base_query_s,
        baseline_doc_seconds=base_doc_s,
        query_tokens_per_sec=tokens_per_sec(workload.query_len, query_s),
        doc_tokens_per_sec=tokens_per_sec(workload.doc_len, doc_s),
        query_speedup=base_query_s / query_s,
        doc_speedup=base_doc_s / doc_s,
    )
    logger.info(
        "bench_completed",
        model=model_name,
        baseline=baseline_name,
        query_speedup=report.query_speedup,
        doc_speedup=report.doc_speedup,
    )
    return report


def search_latency(
    model: EncoderModel,
    corpus: EvalCorpus,
    k: int = 10,
    repetitions: int = BenchDefaults.REPETITIONS,
    warmup: int = BenchDefaults.WARMUP,
) -> float:
    """Median milliseconds per query for encoding the query and scoring it against pre-encoded documents."""
    encoder = BatchEncoder(model, threads=BENCH_THREADS)
    doc_ids = list(corpus.documents)
    query_ids = list(corpus.queries)
    d_emb = encoder.encode([corpus.documents[d] for d in doc_ids])
    queries = [corpus.queries[q] for q in query_ids]

    def run() -> None:
        exact_top_k(encoder.encode(queries, side="query"), d_emb, query_ids, doc_ids, k)

    seconds = _median_times({"search": run}, repetitions, warmup, "search")["search"]
    return 1000.0 * seconds / len(query_ids)
