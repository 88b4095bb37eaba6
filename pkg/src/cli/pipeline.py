"""Stage drivers shared by the single-stage commands and the full pipeline.

Every stage writes its artifacts under its own output directory, stamps each
JSON artifact with the config hash and seed, and appends one ledger entry.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

from src.cli.schemas import CalibrationSource, DropSettings, EvalSettings, ExperimentConfig, Stage, stage_seed
from src.core.config import settings
from src.core.encoder import EncoderModel, count_params
from src.core.errors import CheckpointError
from src.evaluation.analysis import isotropy
from src.evaluation.bench import BenchReport, Workload, search_latency, throughput_bench
from src.evaluation.experiments import analytic_params
from src.evaluation.metrics import EvalCorpus, RunResult, ndcg_at_k, per_query_ndcg, write_trec_run
from src.evaluation.plots import HEATMAP_GROUPS, plot_drop_order
from src.evaluation.search import exact_top_k, scorer_search
from src.inference.checkpoint import load_checkpoint, model_fingerprint, save_checkpoint
from src.inference.embedder import BatchEncoder
from src.services.redundancy import (
    CalibrationSet,
    ImportanceReport,
    PruningPlan,
    apply_drop,
    drop_order_from_report,
    random_token_calibration,
    score_sublayers,
    select_retained,
)
from src.services.slimming import SlimConfig, SlimOutcome, self_slim
from src.training.callbacks import TrainingCallback, get_training_callbacks
from src.training.datasets import TripletRecord
from src.training.synthetic import (
    KeywordOverlapScorer,
    Scorer,
    SyntheticTask,
    calibration_sequences,
    generate_synthetic,
)
from src.training.trainer import RetrievalTrainer, TrainConfig, TrainResult
from src.utils.logger import get_logger
from src.utils.metrics import write_metrics
from src.utils.run_ledger import RunLedger, config_hash

logger = get_logger(__name__)


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path


def read_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@dataclass
class StageContext:
    seed: int
    digest: str
    ledger: Optional[RunLedger] = None
    threads: int = 1

    @classmethod
    def for_config(cls, config: ExperimentConfig, ledger: Optional[RunLedger] = None) -> "StageContext":
        return cls(seed=config.seed, digest=config_hash(config), ledger=ledger, threads=settings.THREADS)

    def stamp(self, payload: dict) -> dict:
        return {"config_hash": self.digest, "seed": self.seed, **payload}

    def record(self, stage: str, outputs: dict, metrics: Optional[dict] = None) -> None:
        if self.ledger is not None:
            self.ledger.record(stage, self.digest, self.seed, outputs={k: str(v) for k, v in outputs.items()}, metrics=metrics)


def build_calibration(config: ExperimentConfig, vocab_size: int, seed: int) -> CalibrationSet:
    calib = config.calibration
    if calib.source == CalibrationSource.RANDOM:
        return random_token_calibration(vocab_size, calib.samples, calib.seq_len, seed=seed)
    sequences = calibration_sequences(config.task, calib.samples, calib.seq_len, seed=seed)
    return CalibrationSet(sequences=sequences, seed=seed)


def profile_stage(ctx: StageContext, model: EncoderModel, calib: CalibrationSet, out: Path) -> ImportanceReport:
    report = score_sublayers(model, calib, threads=ctx.threads, fingerprint=model_fingerprint(model))
    order = drop_order_from_report(report)
    report_path = write_json(
        out / "importance.json",
        ctx.stamp({"report": report.model_dump(mode="json"), "entries": report.entries()}),
    )
    order_path = write_json(
        out / "drop_order.json",
        ctx.stamp({"drop_order": order.model_dump(), "heatmaps": {g: order.heatmap(g) for g in HEATMAP_GROUPS}}),
    )
    plot_path = plot_drop_order(order, out / "drop_order.svg")
    ctx.record(
        "profile",
        {"report": report_path, "drop_order": order_path, "plot": plot_path},
        {"samples": report.samples, "skipped_positions": report.skipped_positions},
    )
    return report


def load_report(path: Path) -> ImportanceReport:
    payload = read_json(path)
    return ImportanceReport.model_validate(payload.get("report", payload))


def drop_stage(
    ctx: StageContext,
    model: EncoderModel,
    report: ImportanceReport,
    drop: DropSettings,
    out: Path,
) -> tuple[EncoderModel, PruningPlan, dict]:
    if report.model_fingerprint is not None and report.model_fingerprint != model_fingerprint(model):
        raise CheckpointError("importance report was computed for a different model")
    n = model.n_layers
    plan = select_retained(
        report,
        n if drop.k_attn is None else drop.k_attn,
        n if drop.k_mlp is None else drop.k_mlp,
        drop.mode,
    )
    pruned = apply_drop(model, plan)
    before, after = count_params(model), count_params(pruned)
    diff = {
        "label": plan.label,
        "plan": plan.model_dump(mode="json"),
        "params_before": before,
        "params_after": after,
        "params_removed": before - after,
        "analytic_removed": analytic_params(model) - analytic_params(pruned),
    }
    diff_path = write_json(out / "drop.json", ctx.stamp(diff))
    ctx.record("drop", {"diff": diff_path}, {"params_removed": diff["params_removed"]})
    return pruned, plan, diff


def slim_stage(
    ctx: StageContext,
    model: EncoderModel,
    records: Sequence[TripletRecord],
    slim: SlimConfig,
    retrain: TrainConfig,
    out: Path,
    callbacks: Optional[Sequence[TrainingCallback]] = None,
) -> SlimOutcome:
    outcome = self_slim(model, records, slim, retrain, callbacks)
    params = count_params(outcome.model)
    summary = {
        "mask_zeros": outcome.mask.zeros,
        "mask_total": outcome.mask.total,
        "zeros_per_layer": outcome.mask.zeros_per_layer(),
        "params_before": count_params(model),
        "params_after": params,
        "analytic_params": analytic_params(outcome.model),
        "surrogate_curve": [record.terms["surrogate"] for record in outcome.gate_history],
        "retrain_curve": [record.total for record in outcome.retrain_history],
        "metadata": outcome.metadata,
    }
    summary_path = write_json(out / "slim.json", ctx.stamp(summary))
    mask_path = write_json(out / "mask.json", ctx.stamp({"mask": outcome.mask.to_dict()}))
    ctx.record("slim", {"summary": summary_path, "mask": mask_path}, {"params": params, "zeros": outcome.mask.zeros})
    return outcome


def train_stage(
    ctx: StageContext,
    model: EncoderModel,
    records: Sequence[TripletRecord],
    config: TrainConfig,
    out: Path,
    callbacks: Optional[Sequence[TrainingCallback]] = None,
) -> TrainResult:
    result = RetrievalTrainer(config, callbacks).train(model, records)
    curve_path = write_json(
        out / "train.json",
        ctx.stamp({"loss_curve": result.loss_curve, "history": [r.terms for r in result.history], "metadata": result.metadata}),
    )
    ctx.record("train", {"curve": curve_path}, {"final_loss": result.loss_curve[-1] if result.loss_curve else None})
    return result


def eval_stage(
    ctx: StageContext,
    model: Optional[EncoderModel],
    corpus: EvalCorpus,
    options: EvalSettings,
    out: Path,
    scorer: Optional[Scorer] = None,
) -> tuple[RunResult, float]:
    extra: dict[str, Any] = {}
    if scorer is not None:
        run = scorer_search(scorer, corpus, k=options.cutoff)
    else:
        encoder = BatchEncoder(model, threads=ctx.threads)
        query_ids, doc_ids = list(corpus.queries), list(corpus.documents)
        q_emb = encoder.encode([corpus.queries[q] for q in query_ids], side="query")
        d_emb = encoder.encode([corpus.documents[d] for d in doc_ids], side="doc")
        run = exact_top_k(q_emb, d_emb, query_ids, doc_ids, options.cutoff)
        if len(doc_ids) > 1:
            extra["doc_isotropy"] = isotropy(d_emb)
    score = ndcg_at_k(run, corpus.qrels, options.cutoff)
    run_path = out / "run.trec"
    write_trec_run(run_path, run)
    eval_path = write_json(
        out / "eval.json",
        ctx.stamp(
            {
                f"ndcg@{options.cutoff}": score,
                "cutoff": options.cutoff,
                "scorer": "oracle" if scorer is not None else "model",
                "per_query": per_query_ndcg(run, corpus.qrels, options.cutoff),
                **extra,
            }
        ),
    )
    ctx.record("eval", {"run": run_path, "summary": eval_path}, {"ndcg": score, **extra})
    return run, score


def bench_stage(
    ctx: StageContext,
    model: EncoderModel,
    workload: Workload,
    out: Path,
    baseline: Optional[EncoderModel] = None,
    corpus: Optional[EvalCorpus] = None,
    model_name: str = "model",
    baseline_name: str = "baseline",
) -> BenchReport:
    report = throughput_bench(
        model,
        workload,
        baseline=baseline,
        model_name=model_name,
        baseline_name=baseline_name if baseline is not None else None,
    )
    if corpus is not None:
        report.search_ms_per_query = search_latency(model, corpus, repetitions=workload.repetitions, warmup=workload.warmup)
    bench_path = write_json(out / "bench.json", ctx.stamp(report.model_dump()))
    outputs = {"report": bench_path}
    if settings.METRICS_ENABLED:
        metrics_path = out / "metrics.prom"
        write_metrics(metrics_path)
        outputs["metrics"] = metrics_path
    ctx.record("bench", outputs, {"query_speedup": report.query_speedup, "doc_speedup": report.doc_speedup})
    return report


def run_pipeline(config: ExperimentConfig, ledger: Optional[RunLedger] = None) -> dict:
    """Run the configured stage list from one root seed; returns the summary it writes."""
    out = Path(config.out)
    ctx = StageContext.for_config(config, ledger)
    task: SyntheticTask = config.task.model_copy(update={"seed": stage_seed(config.seed, "task")})
    dataset = generate_synthetic(task)
    if config.init_from is not None:
        model = load_checkpoint(Path(config.init_from)).model
    else:
        model = EncoderModel.init(config.model, seed=stage_seed(config.seed, "init"))

    callbacks = get_training_callbacks(log_freq=config.train.log_freq, tensorboard_dir=out / "tensorboard")
    baseline = model
    structural_change = False
    report: Optional[ImportanceReport] = None
    summary: dict[str, Any] = {"stages": []}

    for index, stage in enumerate(config.stages):
        stage_out = out / f"{index:02d}-{stage.value}"
        logger.info("stage_started", stage=stage.value, index=index, out=str(stage_out))
        entry: dict[str, Any] = {"stage": stage.value, "out": str(stage_out)}
        if stage == Stage.TRAIN:
            train_config = config.train.model_copy(update={"seed": stage_seed(config.seed, f"train:{index}")})
            result = train_stage(ctx, model, dataset.train, train_config, stage_out, callbacks)
            model = result.model
            entry["final_loss"] = result.loss_curve[-1]
            if not structural_change:
                baseline = model
        elif stage == Stage.PROFILE:
            calib = build_calibration(config, model.config.vocab_size, stage_seed(config.seed, "calibration"))
            report = profile_stage(ctx, model, calib, stage_out)
        elif stage == Stage.DROP:
            model, plan, diff = drop_stage(ctx, model, report, config.drop, stage_out)
            entry.update(label=plan.label, params_removed=diff["params_removed"])
            structural_change = True
        elif stage == Stage.SLIM:
            slim_config = config.slim.model_copy(update={"seed": stage_seed(config.seed, "slim")})
            retrain = config.retrain_config.model_copy(update={"seed": stage_seed(config.seed, "retrain")})
            outcome = slim_stage(ctx, model, dataset.train, slim_config, retrain, stage_out, callbacks)
            model = outcome.model
            entry.update(mask_zeros=outcome.mask.zeros)
            structural_change = True
        elif stage == Stage.EVAL:
            scorer = KeywordOverlapScorer.for_task(task) if config.eval.scorer == "oracle" else None
            _, score = eval_stage(ctx, model, dataset.eval, config.eval, stage_out, scorer=scorer)
            entry[f"ndcg@{config.eval.cutoff}"] = score
        elif stage == Stage.BENCH:
            bench = bench_stage(
                ctx,
                model,
                config.bench,
                stage_out,
                baseline=baseline,
                corpus=dataset.eval,
                baseline_name="Full-Model",
            )
            entry.update(query_speedup=bench.query_speedup, doc_speedup=bench.doc_speedup)
        summary["stages"].append(entry)

    final_dir = out / "final"
    save_checkpoint(model, final_dir, seed=config.seed, metadata={"config_hash": ctx.digest})
    summary.update(
        params=count_params(model),
        analytic_params=analytic_params(model),
        fingerprint=model_fingerprint(model),
        checkpoint=str(final_dir),
    )
    write_json(out / "summary.json", ctx.stamp(summary))
    logger.info("pipeline_completed", out=str(out), params=summary["params"])
    return summary
