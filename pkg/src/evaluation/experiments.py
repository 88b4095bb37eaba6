"""Drop-variant grids, the width-versus-depth comparison and gate ratio sweeps."""
from typing import Optional, Sequence

from pydantic import BaseModel, Field

from src.core.encoder import EncoderModel, count_params, param_breakdown
from src.core.errors import ContractError
from src.evaluation.bench import Workload, throughput_bench
from src.evaluation.metrics import DEFAULT_CUTOFF, EvalCorpus, ndcg_at_k
from src.evaluation.search import brute_force_search
from src.services.redundancy import (
    CalibrationSet,
    DropOrder,
    ImportanceReport,
    PlanMode,
    PruningPlan,
    apply_drop,
    drop_order_from_report,
    last_blocks_plan,
    score_sublayers,
    select_retained,
)
from src.services.slimming import (
    SlimConfig,
    SlimmingTrainer,
    SlimState,
    global_prune,
    install_gates,
    self_slim,
)
from src.training.callbacks import TrainingCallback
from src.training.datasets import TripletRecord
from src.training.trainer import RetrievalTrainer, TrainConfig
from src.utils.logger import get_logger

logger = get_logger(__name__)

FULL_MODEL: str = "Full-Model"
DEFAULT_WIDTH_RATIOS: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


class RedundancyExperimentConfig(BaseModel):
    modes: list[PlanMode] = Field(default_factory=lambda: [PlanMode.ATTN_ONLY, PlanMode.MLP_ONLY, PlanMode.BLOCK])
    k_values: list[int] = Field(default_factory=lambda: [0, 2, 4], description="Sublayers or blocks dropped")
    combined: list[tuple[int, int]] = Field(default_factory=list, description="(attention, MLP) pairs dropped together")
    refinetune: bool = False
    train: TrainConfig = Field(default_factory=TrainConfig)
    cutoff: int = Field(default=DEFAULT_CUTOFF, ge=1)
    bench: Optional[Workload] = None
    threads: int = Field(default=1, ge=1)


class VariantRow(BaseModel):
    label: str
    mode: str
    dropped_attn: list[int]
    dropped_mlp: list[int]
    finetuned: bool
    ndcg: float
    params: int
    analytic_params: int
    query_speedup: Optional[float] = None
    doc_speedup: Optional[float] = None


class RedundancyReport(BaseModel):
    n_layers: int
    importance: ImportanceReport
    drop_order: DropOrder
    rows: list[VariantRow]

    def row(self, label: str, finetuned: bool = False) -> VariantRow:
        for row in self.rows:
            if row.label == label and row.finetuned == finetuned:
                return row
        raise KeyError(label)


def variant_label(mode: PlanMode, k_attn: int, k_mlp: int) -> str:
    if mode == PlanMode.ATTN_ONLY:
        return f"Drop-{k_attn}A"
    if mode == PlanMode.MLP_ONLY:
        return f"Drop-{k_mlp}M"
    if mode == PlanMode.BLOCK:
        return f"Drop-{k_attn}B"
    if mode == PlanMode.LAST_BLOCKS:
        return f"Drop-Last{k_attn}B"
    return f"Drop-{k_mlp}M{k_attn}A"


def plan_for(report: ImportanceReport, mode: PlanMode, k_attn: int, k_mlp: int) -> PruningPlan:
    """Plan dropping ``k_attn`` attention and ``k_mlp`` MLP sublayers (blocks count through ``k_attn``)."""
    n = report.n_layers
    if mode == PlanMode.ATTN_ONLY:
        return select_retained(report, n - k_attn, n, mode)
    if mode == PlanMode.MLP_ONLY:
        return select_retained(report, n, n - k_mlp, mode)
    if mode == PlanMode.BLOCK:
        return select_retained(report, n - k_attn, n - k_attn, mode)
    if mode == PlanMode.LAST_BLOCKS:
        return last_blocks_plan(n, n - k_attn)
    return select_retained(report, n - k_attn, n - k_mlp, PlanMode.COMBINED)


def analytic_params(model: EncoderModel) -> int:
    return param_breakdown(
        model.config,
        attn_present=[block.attn is not None for block in model.blocks],
        mlp_widths=[block.mlp.width if block.mlp is not None else 0 for block in model.blocks],
    ).total


def evaluate_ndcg(model: EncoderModel, corpus: EvalCorpus, cutoff: int = DEFAULT_CUTOFF, threads: int = 1) -> float:
    return ndcg_at_k(brute_force_search(model, corpus, k=cutoff, threads=threads), corpus.qrels, cutoff)


def _row(
    label: str,
    mode: str,
    plan: Optional[PruningPlan],
    variant: EncoderModel,
    base: EncoderModel,
    corpus: EvalCorpus,
    config: RedundancyExperimentConfig,
    finetuned: bool,
) -> VariantRow:
    row = VariantRow(
        label=label,
        mode=mode,
        dropped_attn=plan.dropped_attn if plan else [],
        dropped_mlp=plan.dropped_mlp if plan else [],
        finetuned=finetuned,
        ndcg=evaluate_ndcg(variant, corpus, config.cutoff, config.threads),
        params=count_params(variant),
        analytic_params=analytic_params(variant),
    )
    if config.bench is not None:
        bench = throughput_bench(variant, config.bench, baseline=base, model_name=label, baseline_name=FULL_MODEL)
        row.query_speedup = bench.query_speedup
        row.doc_speedup = bench.doc_speedup
    logger.info("variant_evaluated", label=label, finetuned=finetuned, ndcg=row.ndcg, params=row.params)
    return row


def redundancy_experiment(
    model: EncoderModel,
    calib: CalibrationSet,
    corpus: EvalCorpus,
    config: RedundancyExperimentConfig,
    train_records: Optional[Sequence[TripletRecord]] = None,
    callbacks: Optional[Sequence[TrainingCallback]] = None,
) -> RedundancyReport:
    """Evaluate every drop variant directly and, optionally, after contrastive re-finetuning."""
    if config.refinetune and not train_records:
        raise ContractError("re-finetuning needs training records")
    importance = score_sublayers(model, calib, threads=config.threads)

    variants: list[tuple[str, str, Optional[PruningPlan], EncoderModel]] = [(FULL_MODEL, "full", None, model)]
    for mode in config.modes:
        for k in config.k_values:
            k_attn = 0 if mode == PlanMode.MLP_ONLY else k
            k_mlp = 0 if mode == PlanMode.ATTN_ONLY else k
            plan = plan_for(importance, mode, k_attn, k_mlp)
            variants.append((variant_label(mode, k_attn, k_mlp), mode.value, plan, apply_drop(model, plan)))
    for k_attn, k_mlp in config.combined:
        plan = plan_for(importance, PlanMode.COMBINED, k_attn, k_mlp)
        variants.append((variant_label(PlanMode.COMBINED, k_attn, k_mlp), PlanMode.COMBINED.value, plan, apply_drop(model, plan)))

    rows = []
    for label, mode, plan, variant in variants:
        rows.append(_row(label, mode, plan, variant, model, corpus, config, finetuned=False))
        if config.refinetune:
            tuned = RetrievalTrainer(config.train, callbacks).train(variant, train_records, phase="refinetune").model
            rows.append(_row(label, mode, plan, tuned, model, corpus, config, finetuned=True))

    return RedundancyReport(
        n_layers=model.n_layers,
        importance=importance,
        drop_order=drop_order_from_report(importance),
        rows=rows,
    )


class WidthDepthRow(BaseModel):
    label: str
    strategy: str
    neurons_removed: int
    params: int
    ndcg: float


def width_vs_depth_experiment(
    model: EncoderModel,
    calib: CalibrationSet,
    records: Sequence[TripletRecord],
    corpus: EvalCorpus,
    extra_mlp_drops: Sequence[int],
    slim: SlimConfig,
    retrain: TrainConfig,
    cutoff: int = DEFAULT_CUTOFF,
    threads: int = 1,
) -> list[WidthDepthRow]:
    """From one base, remove the same number of MLP neurons by dropping layers or by slimming."""
    importance = score_sublayers(model, calib, threads=threads)
    present = sum(importance.mlp_present)
    total_neurons = sum(mlp.width for _, mlp in model.mlp_layers())
    trainer = RetrievalTrainer(retrain)

    rows = [
        WidthDepthRow(
            label="base",
            strategy="none",
            neurons_removed=0,
            params=count_params(model),
            ndcg=evaluate_ndcg(model, corpus, cutoff, threads),
        )
    ]
    for m in extra_mlp_drops:
        if not 0 < m < present:
            raise ContractError(f"cannot drop {m} of {present} MLP sublayers")
        plan = select_retained(importance, model.n_layers, present - m, PlanMode.MLP_ONLY)
        depth = trainer.train(apply_drop(model, plan), records, phase="depth_retrain").model
        removed = sum(model.blocks[i].mlp.width for i in plan.dropped_mlp if model.blocks[i].mlp is not None)
        rows.append(
            WidthDepthRow(
                label=f"Drop-{m}M",
                strategy="depth",
                neurons_removed=removed,
                params=count_params(depth),
                ndcg=evaluate_ndcg(depth, corpus, cutoff, threads),
            )
        )

        outcome = self_slim(model, records, slim.model_copy(update={"prune_ratio": removed / total_neurons}), retrain)
        rows.append(
            WidthDepthRow(
                label=f"Slim-{outcome.mask.zeros}N",
                strategy="width",
                neurons_removed=outcome.mask.zeros,
                params=count_params(outcome.model),
                ndcg=evaluate_ndcg(outcome.model, corpus, cutoff, threads),
            )
        )
    return rows


class WidthSweep(BaseModel):
    """Surviving intermediate neurons per MLP layer at each global prune ratio."""

    layers: list[int]
    widths: list[int]
    ratios: list[float]
    # one row per ratio, one column per layer
    survivors: list[list[int]]

    def totals(self) -> list[int]:
        return [sum(row) for row in self.survivors]


def width_sweep(state: SlimState, ratios: Sequence[float] = DEFAULT_WIDTH_RATIOS) -> WidthSweep:
    """Rank one set of trained gates at every ratio; nothing is retrained."""
    if not ratios:
        raise ContractError("width sweep needs at least one prune ratio")
    layers = sorted(state.gates)
    survivors = []
    for ratio in ratios:
        mask = global_prune(state, ratio)
        survivors.append([int(mask.masks[layer].sum()) for layer in layers])
    return WidthSweep(
        layers=layers,
        widths=[int(state.gates[layer].size) for layer in layers],
        ratios=[float(r) for r in ratios],
        survivors=survivors,
    )


def width_reduction_experiment(
    model: EncoderModel,
    records: Sequence[TripletRecord],
    slim: SlimConfig,
    ratios: Sequence[float] = DEFAULT_WIDTH_RATIOS,
    callbacks: Optional[Sequence[TrainingCallback]] = None,
) -> WidthSweep:
    """Train gates once on a copy of ``model``, then sweep the prune ratio over them."""
    gated = install_gates(model.copy())
    SlimmingTrainer(slim, callbacks).train(gated, records)
    sweep = width_sweep(SlimState.from_model(gated), ratios)
    logger.info("width_sweep_completed", ratios=sweep.ratios, survivors=sweep.totals())
    return sweep
