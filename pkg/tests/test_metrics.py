import math

import numpy as np
import pytest

from src.core.errors import ContractError
from src.evaluation.metrics import (
    EvalCorpus,
    RunResult,
    ndcg_at_k,
    per_query_ndcg,
    read_trec_run,
    write_trec_run,
)
from src.evaluation.search import brute_force_search, exact_top_k, rank_scores, scorer_search
from src.training.synthetic import KeywordOverlapScorer


def _reference_ndcg(ranked, judged, k):
    dcg = 0.0
    for i, doc_id in enumerate(ranked[:k]):
        dcg += (2 ** judged.get(doc_id, 0) - 1) / math.log2(i + 2)
    ideal = sorted(judged.values(), reverse=True)[:k]
    idcg = sum((2**rel - 1) / math.log2(i + 2) for i, rel in enumerate(ideal))
    return dcg / idcg


def _reference_top_k(row, doc_ids, k):
    return [doc_ids[j] for j in sorted(range(len(doc_ids)), key=lambda j: (-row[j], doc_ids[j]))[:k]]


class TestNdcg:
    def test_perfect_and_reversed_rankings(self):
        qrels = {"q": {"a": 2, "b": 1}}
        perfect = RunResult(rankings={"q": [("a", 2.0), ("b", 1.0), ("c", 0.0)]}, k=3)
        assert ndcg_at_k(perfect, qrels, k=3) == pytest.approx(1.0)
        reversed_run = RunResult(rankings={"q": [("c", 2.0), ("b", 1.0), ("a", 0.0)]}, k=3)
        expected = (1 / math.log2(3) + 3 / math.log2(4)) / (3 + 1 / math.log2(3))
        assert ndcg_at_k(reversed_run, qrels, k=3) == pytest.approx(expected)

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n_docs = int(rng.integers(3, 30))
            k = int(rng.integers(1, 12))
            doc_ids = [f"d{i}" for i in range(n_docs)]
            grades = rng.integers(0, 4, size=n_docs)
            grades[rng.integers(n_docs)] = max(1, grades.max())
            judged = {d: int(g) for d, g in zip(doc_ids, grades) if rng.random() < 0.7 or g > 0}
            order = rng.permutation(n_docs)
            ranking = [(doc_ids[j], float(n_docs - i)) for i, j in enumerate(order)]
            run = RunResult(rankings={"q": ranking[:k]}, k=k)
            assert ndcg_at_k(run, {"q": judged}, k) == pytest.approx(
                _reference_ndcg([d for d, _ in ranking], judged, k), abs=1e-12
            )

    def test_unjudged_queries_are_skipped(self):
        run = RunResult(rankings={"q1": [("a", 1.0)], "q2": [("a", 1.0)]}, k=1)
        scores = per_query_ndcg(run, {"q1": {"a": 1}, "q2": {"a": 0}, "q3": {}}, k=1)
        assert scores == {"q1": 1.0}

    def test_missing_ranking_scores_zero(self):
        run = RunResult(rankings={}, k=5)
        assert per_query_ndcg(run, {"q": {"a": 1}}) == {"q": 0.0}

    def test_no_judgments(self):
        with pytest.raises(ContractError):
            ndcg_at_k(RunResult(rankings={}, k=1), {"q": {"a": 0}})

    def test_bad_cutoff(self):
        with pytest.raises(ContractError):
            per_query_ndcg(RunResult(rankings={}, k=1), {}, k=0)


class TestRunResult:
    def test_rejects_duplicates(self):
        with pytest.raises(ContractError, match="duplicate"):
            RunResult(rankings={"q": [("a", 1.0), ("a", 0.5)]}, k=2)

    def test_rejects_increasing_scores(self):
        with pytest.raises(ContractError, match="increase"):
            RunResult(rankings={"q": [("a", 0.1), ("b", 0.5)]}, k=2)

    def test_trec_file(self, tmp_path):
        run = RunResult(rankings={"q2": [("d3", 0.75), ("d1", 0.5)], "q1": [("d9", 1.0)]}, k=2, tag="exp")
        write_trec_run(tmp_path / "run.trec", run)
        lines = (tmp_path / "run.trec").read_text().splitlines()
        assert lines == ["q1 Q0 d9 1 1.0 exp", "q2 Q0 d3 1 0.75 exp", "q2 Q0 d1 2 0.5 exp"]
        restored = read_trec_run(tmp_path / "run.trec")
        assert restored.rankings == run.rankings
        assert restored.tag == "exp"

    def test_trec_column_count(self, tmp_path):
        (tmp_path / "bad.trec").write_text("q1 Q0 d1 1\n")
        with pytest.raises(ContractError, match="6 columns"):
            read_trec_run(tmp_path / "bad.trec")


class TestSearch:
    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n_docs, n_queries = int(rng.integers(2, 25)), int(rng.integers(1, 4))
            k = int(rng.integers(1, n_docs + 3))
            # coarse values force ties
            scores = rng.integers(0, 4, size=(n_queries, n_docs)).astype(np.float64)
            doc_ids = [f"d{i}" for i in rng.permutation(n_docs)]
            query_ids = [f"q{i}" for i in range(n_queries)]
            run = rank_scores(scores, query_ids, doc_ids, k)
            for row, qid in enumerate(query_ids):
                assert run.top(qid) == _reference_top_k(scores[row], doc_ids, k)

    def test_ties_break_by_doc_id(self):
        run = rank_scores(np.array([[0.5, 0.9, 0.5, 0.5]]), ["q"], ["d7", "d1", "d2", "d0"], k=3)
        assert run.top("q") == ["d1", "d0", "d2"]

    def test_exact_top_k_uses_dot_product(self, rng):
        q = rng.normal(size=(2, 5))
        d = rng.normal(size=(6, 5))
        run = exact_top_k(q, d, ["a", "b"], [f"d{i}" for i in range(6)], k=6)
        assert run.rankings["a"][0][1] == pytest.approx(float((q[0] @ d.T).max()))

    def test_score_matrix_shape(self):
        with pytest.raises(ContractError):
            rank_scores(np.zeros((2, 3)), ["q"], ["a", "b", "c"], k=1)

    def test_oracle_scorer_is_perfect(self, tiny_task, tiny_dataset):
        run = scorer_search(KeywordOverlapScorer.for_task(tiny_task), tiny_dataset.eval, k=10)
        assert ndcg_at_k(run, tiny_dataset.eval.qrels, k=10) == pytest.approx(1.0)

    def test_brute_force_is_thread_independent(self, tiny_model, tiny_dataset):
        serial = brute_force_search(tiny_model, tiny_dataset.eval, k=5, threads=1)
        parallel = brute_force_search(tiny_model, tiny_dataset.eval, k=5, threads=4)
        assert serial.rankings == parallel.rankings
        assert all(len(ranked) == 5 for ranked in serial.rankings.values())

    def test_corpus_rejects_unknown_judged_doc(self):
        with pytest.raises(ContractError, match="unknown doc"):
            EvalCorpus(queries={"q": [1]}, documents={"a": [2]}, qrels={"q": {"b": 1}})
