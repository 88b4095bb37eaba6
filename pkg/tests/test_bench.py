import numpy as np
import pytest

from src.core.encoder import EncoderConfig, EncoderModel, Pooling
from src.core.errors import ContractError
from src.evaluation.analysis import isotropy, layerwise_similarity
from src.evaluation.bench import Workload, search_latency, throughput_bench
from src.services.redundancy import ImportanceReport, apply_drop, select_retained


def _half_mlp_drop(model):
    n = model.n_layers
    report = ImportanceReport(
        n_layers=n,
        attn_scores=[1.0] * n,
        mlp_scores=[float(i) for i in range(n)],
        attn_present=[True] * n,
        mlp_present=[True] * n,
        samples=1,
    )
    return apply_drop(model, select_retained(report, n, n // 2))


class TestThroughput:
    def test_report_fields(self, tiny_model):
        workload = Workload(n_inputs=4, query_len=6, doc_len=12, repetitions=3, warmup=1)
        report = throughput_bench(tiny_model, workload, model_name="tiny")
        assert report.model == "tiny" and report.baseline == "tiny"
        assert report.params == report.baseline_params
        assert report.query_seconds > 0 and report.doc_tokens_per_sec > 0
        assert report.threads == 1

    def test_self_speedup_is_near_one(self, tiny_model):
        workload = Workload(n_inputs=8, query_len=8, doc_len=24, repetitions=9, warmup=2)
        report = throughput_bench(tiny_model, workload)
        assert report.doc_speedup == pytest.approx(1.0, rel=0.5)

    def test_workload_longer_than_model(self, tiny_model):
        with pytest.raises(ContractError, match="max_seq_len"):
            throughput_bench(tiny_model, Workload(doc_len=64))

    @pytest.mark.slow
    def test_dropping_half_the_mlps_is_faster(self):
        config = EncoderConfig(vocab_size=128, d_model=64, n_layers=8, n_heads=4, d_ff=512, max_seq_len=130)
        model = EncoderModel.init(config, seed=0)
        pruned = _half_mlp_drop(model)
        workload = Workload(n_inputs=8, query_len=16, doc_len=96, repetitions=9, warmup=2)
        report = throughput_bench(pruned, workload, baseline=model, model_name="drop-half", baseline_name="full")
        assert report.params < report.baseline_params
        assert report.doc_speedup > 1.0

    def test_search_latency(self, tiny_model, tiny_dataset):
        ms = search_latency(tiny_model, tiny_dataset.eval, k=5, repetitions=2, warmup=1)
        assert ms > 0


class TestAnalysis:
    def test_isotropy_extremes(self):
        assert isotropy(np.tile([[1.0, 0.0, 0.0]], (4, 1))) == pytest.approx(1.0)
        assert isotropy(np.eye(3)) == pytest.approx(0.0)
        assert isotropy(np.array([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx(-1.0)

    def test_isotropy_matches_pairwise_mean(self, rng):
        x = rng.normal(size=(7, 5))
        unit = x / np.linalg.norm(x, axis=1, keepdims=True)
        cos = unit @ unit.T
        expected = (cos.sum() - np.trace(cos)) / (7 * 6)
        assert isotropy(x) == pytest.approx(expected)

    def test_isotropy_needs_two_rows(self):
        with pytest.raises(ContractError):
            isotropy(np.ones((1, 3)))

    def test_layerwise_similarity_has_one_entry_per_boundary(self, tiny_model):
        traces = layerwise_similarity(tiny_model, [3, 4, 5], [[3, 4, 5], [9, 10, 11, 12]])
        assert [t.doc_index for t in traces] == [0, 1]
        assert all(len(t.cosines) == tiny_model.n_layers + 1 for t in traces)
        assert traces[0].cosines == pytest.approx([1.0] * (tiny_model.n_layers + 1))
        assert all(-1.0 - 1e-9 <= c <= 1.0 + 1e-9 for c in traces[1].cosines)

    def test_traces_ignore_token_order_without_attention(self, tiny_config):
        model = EncoderModel.init(tiny_config.model_copy(update={"pooling": Pooling.MEAN}), seed=4)
        for block in model.blocks:
            block.drop_attention()
        doc = [7, 8, 9, 10, 30]
        traces = layerwise_similarity(model, [3, 4, 5], [doc, doc[::-1]])
        assert traces[1].cosines == pytest.approx(traces[0].cosines, abs=1e-6)

    def test_layerwise_similarity_needs_documents(self, tiny_model):
        with pytest.raises(ContractError):
            layerwise_similarity(tiny_model, [1], [])
