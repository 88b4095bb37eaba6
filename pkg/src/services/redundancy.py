"""Sublayer importance scoring and coarse-grained dropping.

A sublayer's importance is ``1 - cos(x_in, x_out)`` where ``x_in`` is the
residual stream entering its slot and ``x_out = x_in + F(norm(x_in))``. The
cosine is taken per token position, averaged over positions, then over
calibration samples.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from src.core.encoder import EncoderModel, SublayerGroup, count_params
from src.core.errors import ContractError, NumericError
from src.core.tokenizer import EOS_ID
from src.utils.logger import get_logger
from src.utils.metrics import CALIBRATION_POSITIONS_SKIPPED

logger = get_logger(__name__)

AGGREGATION: str = "token_mean_then_sample_mean"
MAX_SCORE: float = 2.0


class PlanMode(str, Enum):
    ATTN_ONLY = "attn-only"
    MLP_ONLY = "mlp-only"
    BLOCK = "block"
    COMBINED = "combined"
    LAST_BLOCKS = "last-block"


@dataclass
class CalibrationSet:
    sequences: list[list[int]]
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.sequences:
            raise ContractError("calibration set is empty")
        if any(len(sequence) == 0 for sequence in self.sequences):
            raise ContractError("calibration set contains an empty sequence")

    def __len__(self) -> int:
        return len(self.sequences)


def random_token_calibration(vocab_size: int, samples: int, seq_len: int, seed: int = 0) -> CalibrationSet:
    """Task-independent calibration: uniform random non-<eos> tokens."""
    rng = np.random.default_rng(seed)
    sequences = rng.integers(1, vocab_size, size=(samples, seq_len)).tolist()
    return CalibrationSet(sequences=sequences, seed=seed)


class ImportanceReport(BaseModel):
    n_layers: int = Field(ge=1)
    attn_scores: list[float]
    mlp_scores: list[float]
    attn_present: list[bool]
    mlp_present: list[bool]
    aggregation: str = AGGREGATION
    samples: int = Field(ge=1)
    skipped_positions: int = Field(default=0, ge=0)
    model_fingerprint: Optional[str] = None

    @model_validator(mode="after")
    def _check_scores(self) -> "ImportanceReport":
        for name in ("attn_scores", "mlp_scores", "attn_present", "mlp_present"):
            if len(getattr(self, name)) != self.n_layers:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {self.n_layers}")
        for score in self.attn_scores + self.mlp_scores:
            if not np.isfinite(score) or not 0.0 <= score <= MAX_SCORE:
                raise ValueError(f"importance score {score} outside [0, {MAX_SCORE}]")
        return self

    def scores(self, group: SublayerGroup) -> list[float]:
        return self.attn_scores if group == SublayerGroup.ATTN else self.mlp_scores

    def present(self, group: SublayerGroup) -> list[bool]:
        return self.attn_present if group == SublayerGroup.ATTN else self.mlp_present

    def block_scores(self) -> list[float]:
        return [(a + m) / 2.0 for a, m in zip(self.attn_scores, self.mlp_scores)]

    def entries(self) -> list[dict]:
        rows = []
        for group in SublayerGroup:
            for layer, (score, present) in enumerate(zip(self.scores(group), self.present(group))):
                rows.append({"group": group.value, "layer": layer, "score": score, "present": present})
        return rows


class PruningPlan(BaseModel):
    n_layers: int = Field(ge=1)
    keep_attn: list[int]
    keep_mlp: list[int]
    k_attn: int = Field(ge=0)
    k_mlp: int = Field(ge=0)
    mode: PlanMode = PlanMode.COMBINED

    @field_validator("keep_attn", "keep_mlp")
    @classmethod
    def _sorted_unique(cls, value: list[int]) -> list[int]:
        if len(set(value)) != len(value):
            raise ValueError(f"duplicate layer index in {value}")
        return sorted(value)

    @model_validator(mode="after")
    def _check_sizes(self) -> "PruningPlan":
        if len(self.keep_attn) != self.k_attn or len(self.keep_mlp) != self.k_mlp:
            raise ValueError("retained set sizes do not match k_attn/k_mlp")
        for index in self.keep_attn + self.keep_mlp:
            if not 0 <= index < self.n_layers:
                raise ValueError(f"layer index {index} outside [0, {self.n_layers})")
        return self

    @property
    def dropped_attn(self) -> list[int]:
        return [i for i in range(self.n_layers) if i not in self.keep_attn]

    @property
    def dropped_mlp(self) -> list[int]:
        return [i for i in range(self.n_layers) if i not in self.keep_mlp]

    @property
    def label(self) -> str:
        n_attn, n_mlp = len(self.dropped_attn), len(self.dropped_mlp)
        if self.mode == PlanMode.LAST_BLOCKS:
            return f"Drop-Last{n_attn}B"
        if self.mode == PlanMode.BLOCK:
            return f"Drop-{n_attn}B"
        parts = []
        if n_mlp:
            parts.append(f"{n_mlp}M")
        if n_attn:
            parts.append(f"{n_attn}A")
        return "Drop-" + "".join(parts) if parts else "Full-Model"


@dataclass
class _SlotAccumulator:
    total: float = 0.0
    valid: int = 0
    skipped: int = 0


@dataclass
class _SampleScores:
    slots: dict[tuple[SublayerGroup, int], _SlotAccumulator] = field(default_factory=dict)


def _position_distances(x_in: np.ndarray, x_out: np.ndarray) -> tuple[np.ndarray, int]:
    a = x_in.astype(np.float64)
    b = x_out.astype(np.float64)
    norm_a = np.linalg.norm(a, axis=-1)
    norm_b = np.linalg.norm(b, axis=-1)
    valid = (norm_a > 0) & (norm_b > 0)
    identical = np.all(x_in == x_out, axis=-1)
    cos = np.einsum("ij,ij->i", a[valid], b[valid]) / (norm_a[valid] * norm_b[valid])
    distance = np.clip(1.0 - cos, 0.0, MAX_SCORE)
    distance[identical[valid]] = 0.0
    return distance, int((~valid).sum())


def _score_sample(model: EncoderModel, sequence: Sequence[int]) -> _SampleScores:
    sample = _SampleScores()

    def observe(group: SublayerGroup, layer: int, x_in: np.ndarray, x_out: np.ndarray) -> None:
        distance, skipped = _position_distances(x_in, x_out)
        sample.slots[(group, layer)] = _SlotAccumulator(
            total=float(distance.sum()), valid=int(distance.size), skipped=skipped
        )

    model.forward(model.prepare(sequence), observer=observe)
    return sample


def score_sublayers(
    model: EncoderModel,
    calib: CalibrationSet,
    threads: int = 1,
    fingerprint: Optional[str] = None,
) -> ImportanceReport:
    if model.n_layers < 1:
        raise ContractError("model has no blocks")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(lambda seq: _score_sample(model, seq), calib.sequences))
    else:
        samples = [_score_sample(model, seq) for seq in calib.sequences]

    n_layers = model.n_layers
    present = {
        SublayerGroup.ATTN: [block.attn is not None for block in model.blocks],
        SublayerGroup.MLP: [block.mlp is not None for block in model.blocks],
    }
    scores: dict[SublayerGroup, list[float]] = {group: [0.0] * n_layers for group in SublayerGroup}
    skipped_total = 0
    for group in SublayerGroup:
        for layer in range(n_layers):
            if not present[group][layer]:
                continue
            per_sample: list[float] = []
            for sample in samples:
                slot = sample.slots[(group, layer)]
                skipped_total += slot.skipped
                if slot.valid:
                    per_sample.append(slot.total / slot.valid)
            if not per_sample:
                raise NumericError(f"every calibration position was skipped for {group.value} layer {layer}")
            scores[group][layer] = float(np.clip(np.mean(per_sample), 0.0, MAX_SCORE))

    if skipped_total:
        CALIBRATION_POSITIONS_SKIPPED.inc(skipped_total)
    report = ImportanceReport(
        n_layers=n_layers,
        attn_scores=scores[SublayerGroup.ATTN],
        mlp_scores=scores[SublayerGroup.MLP],
        attn_present=present[SublayerGroup.ATTN],
        mlp_present=present[SublayerGroup.MLP],
        samples=len(calib),
        skipped_positions=skipped_total,
        model_fingerprint=fingerprint,
    )
    logger.info("sublayers_scored", layers=n_layers, samples=len(calib), skipped=skipped_total)
    return report


def _top_k(scores: Sequence[float], present: Sequence[bool], k: int) -> list[int]:
    ranked = sorted((i for i in range(len(scores)) if present[i]), key=lambda i: (-scores[i], i))
    ranked += [i for i in range(len(scores)) if not present[i]]
    return sorted(ranked[:k])


def _infer_mode(n_layers: int, k_attn: int, k_mlp: int) -> PlanMode:
    if k_mlp == n_layers and k_attn < n_layers:
        return PlanMode.ATTN_ONLY
    if k_attn == n_layers and k_mlp < n_layers:
        return PlanMode.MLP_ONLY
    return PlanMode.COMBINED


def select_retained(
    report: ImportanceReport,
    k_attn: int,
    k_mlp: int,
    mode: Optional[PlanMode] = None,
) -> PruningPlan:
    """Retain the ``k`` highest-scoring sublayers per group; ties keep the lower index.

    Already-dropped sublayers rank below every present one, so a ``k`` larger
    than the present count keeps them dropped while filling the set.
    """
    n_layers = report.n_layers
    for name, k in (("k_attn", k_attn), ("k_mlp", k_mlp)):
        if not 0 <= k <= n_layers:
            raise ContractError(f"{name}={k} outside [0, {n_layers}]")

    mode = mode or _infer_mode(n_layers, k_attn, k_mlp)
    if mode in (PlanMode.BLOCK, PlanMode.LAST_BLOCKS):
        if k_attn != k_mlp:
            raise ContractError(f"{mode.value} mode retains whole blocks; got k_attn={k_attn}, k_mlp={k_mlp}")
        if mode == PlanMode.BLOCK:
            block_present = [a or m for a, m in zip(report.attn_present, report.mlp_present)]
            keep = _top_k(report.block_scores(), block_present, k_attn)
        else:
            keep = list(range(k_attn))
        return PruningPlan(n_layers=n_layers, keep_attn=keep, keep_mlp=keep, k_attn=k_attn, k_mlp=k_mlp, mode=mode)

    return PruningPlan(
        n_layers=n_layers,
        keep_attn=_top_k(report.attn_scores, report.attn_present, k_attn),
        keep_mlp=_top_k(report.mlp_scores, report.mlp_present, k_mlp),
        k_attn=k_attn,
        k_mlp=k_mlp,
        mode=mode,
    )


def last_blocks_plan(n_layers: int, k: int) -> PruningPlan:
    """Baseline retaining the first ``k`` blocks regardless of score."""
    if not 0 <= k <= n_layers:
        raise ContractError(f"k={k} outside [0, {n_layers}]")
    keep = list(range(k))
    return PruningPlan(n_layers=n_layers, keep_attn=keep, keep_mlp=keep, k_attn=k, k_mlp=k, mode=PlanMode.LAST_BLOCKS)


def apply_drop(model: EncoderModel, plan: PruningPlan) -> EncoderModel:
    if plan.n_layers != model.n_layers:
        raise ContractError(f"plan covers {plan.n_layers} layers but the model has {model.n_layers}")
    before = count_params(model)
    pruned = model.copy()
    keep_attn, keep_mlp = set(plan.keep_attn), set(plan.keep_mlp)
    for index, block in enumerate(pruned.blocks):
        if index not in keep_attn and block.attn is not None:
            block.drop_attention()
        if index not in keep_mlp and block.mlp is not None:
            block.drop_mlp()
    after = count_params(pruned)
    logger.info(
        "sublayers_dropped",
        plan=plan.label,
        mode=plan.mode.value,
        dropped_attn=plan.dropped_attn,
        dropped_mlp=plan.dropped_mlp,
        params_before=before,
        params_after=after,
    )
    return pruned


class DropOrderEntry(BaseModel):
    group: str
    layer: int
    score: float
    rank: int


class DropOrder(BaseModel):
    n_layers: int
    entries: list[DropOrderEntry]

    def order(self, group: str) -> list[int]:
        return [entry.layer for entry in self.entries if entry.group == group]

    def heatmap(self, group: str) -> list[list[int]]:
        """Row ``k-1`` marks the layers removed when dropping ``k`` of this group."""
        order = self.order(group)
        rows = []
        for k in range(1, len(order) + 1):
            dropped = set(order[:k])
            rows.append([1 if layer in dropped else 0 for layer in range(self.n_layers)])
        return rows


def drop_order_from_report(report: ImportanceReport) -> DropOrder:
    entries: list[DropOrderEntry] = []
    groups = [
        (SublayerGroup.ATTN.value, report.attn_scores, report.attn_present),
        (SublayerGroup.MLP.value, report.mlp_scores, report.mlp_present),
        (
            "block",
            report.block_scores(),
            [a or m for a, m in zip(report.attn_present, report.mlp_present)],
        ),
    ]
    for name, scores, present in groups:
        ranked = sorted((i for i in range(report.n_layers) if present[i]), key=lambda i: (scores[i], i))
        entries.extend(
            DropOrderEntry(group=name, layer=layer, score=scores[layer], rank=rank)
            for rank, layer in enumerate(ranked)
        )
    return DropOrder(n_layers=report.n_layers, entries=entries)


def drop_order_trace(model: EncoderModel, calib: CalibrationSet, threads: int = 1) -> DropOrder:
    return drop_order_from_report(score_sublayers(model, calib, threads=threads))
