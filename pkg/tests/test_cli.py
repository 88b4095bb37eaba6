import json

import pytest

from src.cli.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from src.inference.checkpoint import WEIGHTS_FILE, load_checkpoint
from src.training.datasets import load_corpus, load_triplets
from src.utils.run_ledger import RunLedger

MLP_PARAMS = 3 * 16 * 32 + 16

TINY_EXPERIMENT = {
    "task": {
        "vocab_size": 64,
        "n_docs": 40,
        "n_train_queries": 16,
        "n_eval_queries": 8,
        "query_len": 6,
        "doc_len": 12,
        "n_keywords": 16,
        "keywords_per_doc": 2,
        "n_negatives": 3,
    },
    "model": {"vocab_size": 64, "d_model": 16, "n_layers": 4, "n_heads": 4, "d_ff": 32, "max_seq_len": 40},
    "calibration": {"samples": 4, "seq_len": 10},
    "train": {"max_steps": 2, "batch_size": 4, "warmup_steps": 0},
    "slim": {"steps": 2, "batch_size": 4, "prune_ratio": 0.25},
    "bench": {"n_inputs": 2, "query_len": 4, "doc_len": 8, "repetitions": 1, "warmup": 1},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(TINY_EXPERIMENT))
    return str(path)


@pytest.fixture
def base_checkpoint(config_file, tmp_path):
    out = tmp_path / "base"
    assert main(["init", "--config", config_file, "--out", str(out)]) == EXIT_OK
    return out


def _read(path):
    return json.loads(path.read_text())


class TestExitCodes:
    def test_missing_required_flag_is_usage_error(self, config_file):
        with pytest.raises(SystemExit) as exc:
            main(["drop", "--config", config_file, "--model", "x"])
        assert exc.value.code == EXIT_USAGE

    def test_invalid_value_is_usage_error(self, config_file, base_checkpoint, tmp_path):
        code = main(["train", "--config", config_file, "--model", str(base_checkpoint), "--tau", "-1", "--out", str(tmp_path / "t")])
        assert code == EXIT_USAGE

    def test_missing_model_flag_is_usage_error(self, config_file, tmp_path):
        assert main(["eval", "--config", config_file, "--out", str(tmp_path / "e")]) == EXIT_USAGE

    def test_unknown_checkpoint_is_runtime_error(self, config_file, tmp_path):
        code = main(["eval", "--config", config_file, "--model", str(tmp_path / "nope"), "--out", str(tmp_path / "e")])
        assert code == EXIT_RUNTIME

    def test_unreadable_config(self, tmp_path):
        assert main(["init", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "m")]) == EXIT_USAGE


class TestSingleStages:
    def test_generate(self, config_file, tmp_path):
        out = tmp_path / "data"
        assert main(["generate", "--config", config_file, "--out", str(out)]) == EXIT_OK
        assert len(load_triplets(out / "train.jsonl")) == 16
        assert len(load_corpus(out / "eval").queries) == 8
        assert "config_hash" in _read(out / "task.json")

    def test_init_with_pooling(self, config_file, tmp_path):
        out = tmp_path / "mean"
        assert main(["init", "--config", config_file, "--pooling", "mean", "--out", str(out)]) == EXIT_OK
        assert load_checkpoint(out).model.config.pooling.value == "mean"

    def test_profile_then_full_drop_keeps_weights(self, config_file, base_checkpoint, tmp_path):
        profile = tmp_path / "profile"
        assert main(["profile", "--config", config_file, "--model", str(base_checkpoint), "--out", str(profile)]) == 0
        assert len(_read(profile / "importance.json")["entries"]) == 8
        assert (profile / "drop_order.svg").exists()

        dropped = tmp_path / "dropped"
        args = ["drop", "--config", config_file, "--model", str(base_checkpoint), "--report", str(profile / "importance.json")]
        assert main([*args, "--k-attn", "4", "--k-mlp", "4", "--out", str(dropped)]) == EXIT_OK
        assert (dropped / WEIGHTS_FILE).read_bytes() == (base_checkpoint / WEIGHTS_FILE).read_bytes()
        assert _read(dropped / "drop.json")["params_removed"] == 0

        half = tmp_path / "half"
        assert main([*args, "--k-mlp", "2", "--out", str(half)]) == EXIT_OK
        assert _read(half / "drop.json")["params_removed"] == 2 * MLP_PARAMS
        manifest = load_checkpoint(half).manifest
        assert manifest["pruning"]["k_mlp"] == 2
        assert manifest["metadata"]["parent"] == load_checkpoint(base_checkpoint).fingerprint

    def test_drop_with_report_for_another_model(self, config_file, base_checkpoint, tmp_path):
        other = tmp_path / "other"
        assert main(["init", "--config", config_file, "--seed", "5", "--out", str(other)]) == EXIT_OK
        profile = tmp_path / "profile"
        assert main(["profile", "--config", config_file, "--model", str(other), "--out", str(profile)]) == EXIT_OK
        code = main(
            [
                "drop",
                "--config",
                config_file,
                "--model",
                str(base_checkpoint),
                "--report",
                str(profile / "importance.json"),
                "--out",
                str(tmp_path / "d"),
            ]
        )
        assert code == EXIT_RUNTIME

    def test_oracle_eval_is_perfect(self, config_file, tmp_path):
        out = tmp_path / "oracle"
        assert main(["eval", "--config", config_file, "--scorer", "oracle", "--out", str(out)]) == EXIT_OK
        summary = _read(out / "eval.json")
        assert summary["ndcg@10"] == pytest.approx(1.0)
        assert summary["scorer"] == "oracle"
        assert (out / "run.trec").exists()

    def test_model_eval_and_bench(self, config_file, base_checkpoint, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--config", config_file, "--model", str(base_checkpoint), "--out", str(out)]) == EXIT_OK
        assert 0.0 <= _read(out / "eval.json")["ndcg@10"] <= 1.0
        bench = tmp_path / "bench"
        assert main(["bench", "--config", config_file, "--model", str(base_checkpoint), "--out", str(bench)]) == EXIT_OK
        assert _read(bench / "bench.json")["search_ms_per_query"] > 0
        assert "effirlab_encode_batch_seconds" in (bench / "metrics.prom").read_text()

    def test_slim_phases_in_sequence(self, config_file, base_checkpoint, tmp_path):
        common = ["--config", config_file]
        gates, pruned, slim = tmp_path / "gates", tmp_path / "pruned", tmp_path / "slim"

        assert main(["slim", *common, "--model", str(base_checkpoint), "--phase", "prune", "--out", str(pruned)]) == EXIT_USAGE
        assert main(["slim", *common, "--model", str(base_checkpoint), "--phase", "gates", "--out", str(gates)]) == EXIT_OK
        widths = _read(gates / "widths.json")
        assert widths["ratios"] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
        assert [sum(row) for row in widths["survivors"]] == [128 - int(r * 128 + 0.5) for r in widths["ratios"]]
        assert main(["slim", *common, "--model", str(gates), "--phase", "shrink", "--out", str(slim)]) == EXIT_USAGE
        assert main(["slim", *common, "--model", str(gates), "--phase", "prune", "--out", str(pruned)]) == EXIT_OK
        assert main(["slim", *common, "--model", str(pruned), "--phase", "shrink", "--out", str(slim)]) == EXIT_OK

        summary = _read(slim / "slim.json")
        assert summary["mask_zeros"] == 32
        assert summary["params_before"] - summary["params_after"] >= 32 * 3 * 16
        model = load_checkpoint(slim).model
        assert all(mlp.z is None for _, mlp in model.mlp_layers())

    def test_report_with_width_sweep(self, config_file, base_checkpoint, tmp_path):
        common = ["--config", config_file, "--model", str(base_checkpoint)]
        out = tmp_path / "report"
        assert main(["report", *common, "--width-ratios", "0.25", "0.5", "--out", str(out)]) == EXIT_OK
        assert len(_read(out / "report.json")["rows"]) == 10
        sweep = _read(out / "width_sweep.json")
        assert [sum(row) for row in sweep["survivors"]] == [96, 64]
        for name in ("drop_order.svg", "similarity.svg", "width_sweep.svg"):
            assert (out / name).exists()

        bad = tmp_path / "bad"
        assert main(["report", *common, "--width-ratios", "1.5", "--out", str(bad)]) == EXIT_USAGE
        assert not (bad / "report.json").exists()

    def test_ledger_records_commands(self, config_file, base_checkpoint, isolated_settings):
        entries = RunLedger(isolated_settings.RUNS_PATH).entries(stage="init")
        assert len(entries) == 1
        assert entries[0]["outputs"]["checkpoint"] == str(base_checkpoint)


class TestPipeline:
    def _run(self, config_file, out, *extra):
        return main(["pipeline", "--config", config_file, "--k-mlp", "3", "--out", str(out), *extra])

    def test_runs_every_stage(self, config_file, tmp_path):
        out = tmp_path / "run"
        assert self._run(config_file, out) == EXIT_OK
        summary = _read(out / "summary.json")
        assert [s["stage"] for s in summary["stages"]] == ["train", "profile", "drop", "slim", "eval", "bench"]
        assert summary["stages"][2]["params_removed"] == MLP_PARAMS
        for name in ("00-train/train.json", "01-profile/importance.json", "03-slim/slim.json", "04-eval/run.trec"):
            assert (out / name).exists()
        assert load_checkpoint(out / "final").fingerprint == summary["fingerprint"]

    def test_same_seed_same_result(self, config_file, tmp_path):
        assert self._run(config_file, tmp_path / "a") == EXIT_OK
        assert self._run(config_file, tmp_path / "b") == EXIT_OK
        a, b = _read(tmp_path / "a" / "summary.json"), _read(tmp_path / "b" / "summary.json")
        assert a["fingerprint"] == b["fingerprint"]
        assert a["stages"][4]["ndcg@10"] == b["stages"][4]["ndcg@10"]
        assert (tmp_path / "a" / "final" / WEIGHTS_FILE).read_bytes() == (tmp_path / "b" / "final" / WEIGHTS_FILE).read_bytes()

    def test_bad_stage_order(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({**TINY_EXPERIMENT, "stages": ["drop"]}))
        assert main(["pipeline", "--config", str(path), "--out", str(tmp_path / "x")]) == EXIT_USAGE
