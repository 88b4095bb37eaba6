from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from src.evaluation.analysis import SimilarityTrace  # noqa: E402
from src.evaluation.experiments import WidthSweep  # noqa: E402
from src.services.redundancy import DropOrder  # noqa: E402
from src.utils.logger import get_logger  # noqa: E402

logger = get_logger(__name__)

HEATMAP_GROUPS: tuple[str, ...] = ("attn", "mlp", "block")


def plot_drop_order(order: DropOrder, path: Path, groups: Sequence[str] = HEATMAP_GROUPS) -> Path:
    """One heat map per group: row ``k`` marks the layers gone after dropping ``k`` sublayers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(groups), figsize=(4 * len(groups), 4), squeeze=False)
    for ax, group in zip(axes[0], groups):
        matrix = order.heatmap(group)
        if matrix:
            ax.imshow(matrix, cmap="Blues", vmin=0, vmax=1, aspect="auto")
            ax.set_yticks(range(len(matrix)), [str(k + 1) for k in range(len(matrix))])
        ax.set_title(group)
        ax.set_xlabel("layer")
        ax.set_ylabel("dropped")
        ax.set_xticks(range(order.n_layers))
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info("plot_written", kind="drop_order", path=str(path))
    return path


def plot_width_sweep(sweep: WidthSweep, path: Path) -> Path:
    """Surviving fraction of each layer's intermediate width, one row per prune ratio."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fractions = [[kept / width for kept, width in zip(row, sweep.widths)] for row in sweep.survivors]
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(sweep.layers) + 2), 0.5 * len(sweep.ratios) + 2))
    ax.imshow(fractions, cmap="Greens", vmin=0, vmax=1, aspect="auto")
    for r, row in enumerate(sweep.survivors):
        for c, kept in enumerate(row):
            ax.text(c, r, str(kept), ha="center", va="center", fontsize=7)
    ax.set_xticks(range(len(sweep.layers)), [str(layer) for layer in sweep.layers])
    ax.set_yticks(range(len(sweep.ratios)), [f"{ratio:.2f}" for ratio in sweep.ratios])
    ax.set_xlabel("layer")
    ax.set_ylabel("prune ratio")
    ax.set_title("surviving MLP width")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info("plot_written", kind="width_sweep", path=str(path))
    return path


def plot_similarity_traces(traces: Sequence[SimilarityTrace], path: Path, labels: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for n, trace in enumerate(traces):
        label = labels[n] if n < len(labels) else f"doc {trace.doc_index}"
        ax.plot(range(len(trace.cosines)), trace.cosines, marker="o", label=label)
    ax.set_xlabel("layer (0 = embeddings)")
    ax.set_ylabel("cos(query, doc)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info("plot_written", kind="similarity", path=str(path))
    return path
