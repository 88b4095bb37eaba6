"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from pydantic import ValidationError

from src.cli.pipeline import (
    StageContext,
    bench_stage,
    build_calibration,
    drop_stage,
    eval_stage,
    load_report,
    profile_stage,
    run_pipeline,
    slim_stage,
    train_stage,
    write_json,
)
from src.cli.schemas import CalibrationSource, ExperimentConfig, load_experiment_config, stage_seed
from src.core.config import settings
from src.core.encoder import EncoderModel, Pooling, count_params
from src.core.errors import ConfigError, EffirLabError
from src.evaluation.analysis import layerwise_similarity
from src.evaluation.experiments import (
    DEFAULT_WIDTH_RATIOS,
    RedundancyExperimentConfig,
    redundancy_experiment,
    width_reduction_experiment,
    width_sweep,
    width_vs_depth_experiment,
)
from src.evaluation.metrics import EvalCorpus
from src.evaluation.plots import plot_drop_order, plot_similarity_traces, plot_width_sweep
from src.inference.checkpoint import Checkpoint, save_checkpoint
from src.inference.model_loader import ModelLoader
from src.services.redundancy import PlanMode
from src.services.slimming import (
    PruneMask,
    SlimmingTrainer,
    SlimState,
    apply_mask,
    global_prune,
    install_gates,
    shrink,
)
from src.training.callbacks import get_training_callbacks
from src.training.datasets import TripletRecord, load_corpus, load_triplets, save_corpus, save_triplets
from src.training.synthetic import KeywordOverlapScorer, SyntheticTask, generate_synthetic
from src.training.trainer import RetrievalTrainer
from src.utils.logger import get_logger
from src.utils.metrics import write_metrics
from src.utils.run_ledger import RunLedger

logger = get_logger(__name__)

EXIT_OK: int = 0
EXIT_USAGE: int = 1
EXIT_RUNTIME: int = 2

TRAIN_FILE: str = "train.jsonl"
EVAL_DIR: str = "eval"
TASK_FILE: str = "task.json"
SLIM_PHASES: tuple[str, ...] = ("all", "gates", "prune", "shrink")

# flag dest -> dotted config keys it overrides
FLAG_OVERRIDES: dict[str, tuple[str, ...]] = {
    "seed": ("seed",),
    "out": ("out",),
    "k_attn": ("drop.k_attn",),
    "k_mlp": ("drop.k_mlp",),
    "mode": ("drop.mode",),
    "ratio": ("slim.prune_ratio",),
    "tau": ("train.tau", "slim.tau"),
    "lr": ("train.learning_rate",),
    "epochs": ("train.epochs",),
    "pooling": ("model.pooling",),
    "scorer": ("eval.scorer",),
    "calib": ("calibration.source",),
}


class CliParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def config_overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for dest, keys in FLAG_OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        for key in keys:
            overrides[key] = value
    return overrides


class Command:
    """Resolved inputs shared by the subcommand handlers."""

    def __init__(self, args: argparse.Namespace, config: ExperimentConfig):
        self.args = args
        self.config = config
        self.out = Path(config.out)
        self.ctx = StageContext.for_config(config, RunLedger(settings.RUNS_PATH))
        self.loader = ModelLoader(settings)

    def checkpoint(self, name: Optional[str] = None) -> Checkpoint:
        name = name or getattr(self.args, "model", None)
        if name is None:
            raise ConfigError(f"'{self.args.command}' needs --model")
        return self.loader.load_model(name)

    def model(self) -> EncoderModel:
        return self.checkpoint().model

    def task(self) -> SyntheticTask:
        return self.config.task.model_copy(update={"seed": stage_seed(self.config.seed, "task")})

    def data(self) -> tuple[list[TripletRecord], EvalCorpus]:
        directory = getattr(self.args, "data", None)
        if directory is None:
            dataset = generate_synthetic(self.task())
            return dataset.train, dataset.eval
        directory = Path(directory)
        return load_triplets(directory / TRAIN_FILE), load_corpus(directory / EVAL_DIR, self.config.task.vocab_size)

    def callbacks(self):
        return get_training_callbacks(log_freq=self.config.train.log_freq, tensorboard_dir=self.out / "tensorboard")

    def save(self, model: EncoderModel, source: Optional[Checkpoint] = None, **extra: Any) -> Path:
        metadata = {"config_hash": self.ctx.digest, "stage": self.args.command}
        if source is not None:
            metadata["parent"] = source.fingerprint
        path = save_checkpoint(model, self.out, seed=self.config.seed, metadata=metadata, **extra)
        self.ctx.record(self.args.command, {"checkpoint": path}, {"params": count_params(model)})
        return path


def cmd_init(cmd: Command) -> None:
    model = EncoderModel.init(cmd.config.model, seed=stage_seed(cmd.config.seed, "init"))
    cmd.save(model)


def cmd_generate(cmd: Command) -> None:
    task = cmd.task()
    dataset = generate_synthetic(task)
    save_triplets(cmd.out / TRAIN_FILE, dataset.train)
    save_corpus(cmd.out / EVAL_DIR, dataset.eval)
    write_json(cmd.out / TASK_FILE, cmd.ctx.stamp({"task": task.model_dump(mode="json")}))
    cmd.ctx.record("generate", {"data": cmd.out}, {"train": len(dataset.train), "queries": len(dataset.eval.queries)})


def cmd_profile(cmd: Command) -> None:
    model = cmd.model()
    calib = build_calibration(cmd.config, model.config.vocab_size, stage_seed(cmd.config.seed, "calibration"))
    profile_stage(cmd.ctx, model, calib, cmd.out)


def cmd_drop(cmd: Command) -> None:
    source = cmd.checkpoint()
    report = load_report(Path(cmd.args.report))
    pruned, plan, _ = drop_stage(cmd.ctx, source.model, report, cmd.config.drop, cmd.out)
    cmd.save(pruned, source, pruning=plan.model_dump(mode="json"))


def cmd_slim(cmd: Command) -> None:
    source = cmd.checkpoint()
    records, _ = cmd.data()
    slim_config = cmd.config.slim.model_copy(update={"seed": stage_seed(cmd.config.seed, "slim")})
    retrain = cmd.config.retrain_config.model_copy(update={"seed": stage_seed(cmd.config.seed, "retrain")})
    phase = cmd.args.phase

    if phase == "all":
        outcome = slim_stage(cmd.ctx, source.model, records, slim_config, retrain, cmd.out, cmd.callbacks())
        cmd.save(outcome.model, source, slim_mask=outcome.mask.to_dict())
        return

    model = source.model
    gated = [mlp for _, mlp in model.mlp_layers() if mlp.z is not None]
    if phase == "gates":
        gated_model = install_gates(model.copy())
        result = SlimmingTrainer(slim_config, cmd.callbacks()).train(gated_model, records)
        write_json(cmd.out / "gates.json", cmd.ctx.stamp({"loss_curve": result.loss_curve, "metadata": result.metadata}))
        sweep = width_sweep(SlimState.from_model(gated_model), DEFAULT_WIDTH_RATIOS)
        write_json(cmd.out / "widths.json", cmd.ctx.stamp(sweep.model_dump()))
        plot_width_sweep(sweep, cmd.out / "widths.svg")
        cmd.save(gated_model, source)
    elif phase == "prune":
        if not gated or any(mlp.gate_frozen for mlp in gated):
            raise ConfigError("slim --phase prune needs trained gates; run --phase gates first")
        mask = global_prune(SlimState.from_model(model), slim_config.prune_ratio)
        masked = apply_mask(model.copy(), mask)
        result = RetrievalTrainer(retrain, cmd.callbacks()).train(masked, records, phase="slim_retrain")
        write_json(cmd.out / "mask.json", cmd.ctx.stamp({"mask": mask.to_dict()}))
        cmd.save(result.model, source, slim_mask=mask.to_dict())
    elif phase == "shrink":
        mask_data = source.manifest.get("slim_mask")
        if not gated or not all(mlp.gate_frozen for mlp in gated) or not mask_data:
            raise ConfigError("slim --phase shrink needs a masked checkpoint; run --phase prune first")
        mask = PruneMask.from_dict(mask_data)
        slim = shrink(model, mask)
        write_json(
            cmd.out / "slim.json",
            cmd.ctx.stamp(
                {"mask_zeros": mask.zeros, "params_before": count_params(model), "params_after": count_params(slim)}
            ),
        )
        cmd.save(slim, source, slim_mask=mask.to_dict())


def cmd_train(cmd: Command) -> None:
    source = cmd.checkpoint()
    records, _ = cmd.data()
    config = cmd.config.train.model_copy(update={"seed": stage_seed(cmd.config.seed, "train")})
    result = train_stage(cmd.ctx, source.model, records, config, cmd.out, cmd.callbacks())
    cmd.save(result.model, source)


def cmd_eval(cmd: Command) -> None:
    _, corpus = cmd.data()
    if cmd.config.eval.scorer == "oracle":
        eval_stage(cmd.ctx, None, corpus, cmd.config.eval, cmd.out, scorer=KeywordOverlapScorer.for_task(cmd.task()))
    else:
        eval_stage(cmd.ctx, cmd.model(), corpus, cmd.config.eval, cmd.out)


def cmd_bench(cmd: Command) -> None:
    model = cmd.model()
    baseline = cmd.checkpoint(cmd.args.baseline).model if cmd.args.baseline else None
    _, corpus = cmd.data()
    bench_stage(
        cmd.ctx,
        model,
        cmd.config.bench,
        cmd.out,
        baseline=baseline,
        corpus=corpus,
        model_name=Path(cmd.args.model).name,
        baseline_name=Path(cmd.args.baseline).name if cmd.args.baseline else "baseline",
    )


def cmd_report(cmd: Command) -> None:
    bad = [r for r in cmd.args.width_ratios or () if not 0 <= r < 1]
    if bad:
        raise ConfigError(f"--width-ratios must lie in [0, 1), got {bad}")
    model = cmd.model()
    records, corpus = cmd.data()
    calib = build_calibration(cmd.config, model.config.vocab_size, stage_seed(cmd.config.seed, "calibration"))
    experiment = RedundancyExperimentConfig(
        refinetune=cmd.args.refinetune,
        train=cmd.config.train.model_copy(update={"seed": stage_seed(cmd.config.seed, "refinetune")}),
        cutoff=cmd.config.eval.cutoff,
        bench=cmd.config.bench if cmd.args.bench else None,
        threads=settings.THREADS,
    )
    report = redundancy_experiment(model, calib, corpus, experiment, records, cmd.callbacks())
    outputs: dict[str, Any] = {
        "report": write_json(cmd.out / "report.json", cmd.ctx.stamp(report.model_dump(mode="json"))),
        "drop_order": plot_drop_order(report.drop_order, cmd.out / "drop_order.svg"),
    }

    query_id = sorted(corpus.qrels)[0]
    judged = sorted(corpus.qrels[query_id], key=lambda doc: (-corpus.qrels[query_id][doc], doc))
    unjudged = [doc for doc in sorted(corpus.documents) if doc not in corpus.qrels[query_id]][: len(judged)]
    doc_ids = judged + unjudged
    traces = layerwise_similarity(model, corpus.queries[query_id], [corpus.documents[d] for d in doc_ids])
    outputs["similarity"] = write_json(
        cmd.out / "similarity.json",
        cmd.ctx.stamp({"query": query_id, "docs": doc_ids, "traces": [t.model_dump() for t in traces]}),
    )
    outputs["similarity_plot"] = plot_similarity_traces(traces, cmd.out / "similarity.svg", labels=doc_ids)

    if cmd.args.extra_mlp_drops:
        rows = width_vs_depth_experiment(
            model,
            calib,
            records,
            corpus,
            cmd.args.extra_mlp_drops,
            cmd.config.slim.model_copy(update={"seed": stage_seed(cmd.config.seed, "slim")}),
            cmd.config.retrain_config,
            cutoff=cmd.config.eval.cutoff,
            threads=settings.THREADS,
        )
        outputs["width_vs_depth"] = write_json(
            cmd.out / "width_vs_depth.json", cmd.ctx.stamp({"rows": [row.model_dump() for row in rows]})
        )
    if cmd.args.width_ratios:
        sweep = width_reduction_experiment(
            model,
            records,
            cmd.config.slim.model_copy(update={"seed": stage_seed(cmd.config.seed, "slim")}),
            cmd.args.width_ratios,
            cmd.callbacks(),
        )
        outputs["width_sweep"] = write_json(cmd.out / "width_sweep.json", cmd.ctx.stamp(sweep.model_dump()))
        outputs["width_sweep_plot"] = plot_width_sweep(sweep, cmd.out / "width_sweep.svg")
    cmd.ctx.record("report", outputs, {"variants": len(report.rows)})


def cmd_pipeline(cmd: Command) -> None:
    summary = run_pipeline(cmd.config, cmd.ctx.ledger)
    logger.info("pipeline_summary", stages=len(summary["stages"]), params=summary["params"])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config; flags override its values")
    common.add_argument("--seed", type=int, help="Root seed")
    common.add_argument("--out", help="Output directory")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", help="Checkpoint directory or name under EFFIRLAB_MODEL_PATH")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path, help="Directory written by 'generate'; regenerated from the config when unset")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--tau", type=float)
    training.add_argument("--lr", type=float)
    training.add_argument("--epochs", type=int)

    calib = argparse.ArgumentParser(add_help=False)
    calib.add_argument("--calib", choices=[s.value for s in CalibrationSource], help="Calibration text source")

    parser = CliParser(prog="effirlab", description="Layer dropping and MLP slimming for dense retrievers")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    def add(name: str, handler: Callable[[Command], None], parents: Sequence[argparse.ArgumentParser], help: str):
        sub = commands.add_parser(name, parents=[common, *parents], help=help)
        sub.set_defaults(handler=handler)
        return sub

    init = add("init", cmd_init, [], "Write a freshly initialized checkpoint")
    init.add_argument("--pooling", choices=[p.value for p in Pooling])
    add("generate", cmd_generate, [], "Write the synthetic training triplets and evaluation corpus")
    add("profile", cmd_profile, [model, calib], "Score every sublayer on calibration text")

    drop = add("drop", cmd_drop, [model], "Drop the least important sublayers")
    drop.add_argument("--report", required=True, help="importance.json written by 'profile'")
    drop.add_argument("--k-attn", type=int, help="Attention sublayers to keep")
    drop.add_argument("--k-mlp", type=int, help="MLP sublayers to keep")
    drop.add_argument("--mode", choices=[m.value for m in PlanMode])

    slim = add("slim", cmd_slim, [model, data, training], "Learn MLP gates, prune globally, retrain and shrink")
    slim.add_argument("--ratio", type=float, help="Fraction of gate entries to prune")
    slim.add_argument("--phase", choices=SLIM_PHASES, default="all")

    add("train", cmd_train, [model, data, training], "Contrastive retrieval training")

    evaluate = add("eval", cmd_eval, [model, data], "Exact search over the evaluation corpus and nDCG")
    evaluate.add_argument("--scorer", choices=["model", "oracle"])

    bench = add("bench", cmd_bench, [model, data], "Encoding throughput against a baseline")
    bench.add_argument("--baseline", help="Baseline checkpoint; the model itself when unset")

    report = add("report", cmd_report, [model, data, training, calib], "Drop-variant grid and similarity traces")
    report.add_argument("--refinetune", action="store_true", help="Also re-finetune every variant")
    report.add_argument("--bench", action="store_true", help="Also time every variant")
    report.add_argument("--extra-mlp-drops", type=int, nargs="*", default=[], help="Width-versus-depth comparison")
    report.add_argument(
        "--width-ratios", type=float, nargs="+", help="Train gates once and record surviving MLP widths at each ratio"
    )

    pipeline = add("pipeline", cmd_pipeline, [training], "Run the configured stage list end to end")
    pipeline.add_argument("--k-attn", type=int)
    pipeline.add_argument("--k-mlp", type=int)
    pipeline.add_argument("--mode", choices=[m.value for m in PlanMode])
    pipeline.add_argument("--ratio", type=float)
    pipeline.add_argument("--pooling", choices=[p.value for p in Pooling])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_experiment_config(args.config, config_overrides(args))
        args.handler(Command(args, config))
    except (ConfigError, ValidationError) as e:
        logger.error("command_failed", command=args.command, error=str(e), exit_code=EXIT_USAGE)
        print(f"effirlab {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EffirLabError, OSError) as e:
        logger.error("command_failed", command=args.command, error=str(e), exit_code=EXIT_RUNTIME)
        print(f"effirlab {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    if settings.METRICS_ENABLED:
        write_metrics(Path(config.out) / "metrics.prom")
    logger.info("command_completed", command=args.command, out=config.out)
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
