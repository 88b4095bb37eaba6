from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

REGISTRY = CollectorRegistry()

TRAIN_STEPS = Counter(
    "effirlab_train_steps_total", "Optimizer steps taken", ["phase"], registry=REGISTRY
)

TRAIN_LOSS = Gauge(
    "effirlab_train_loss", "Latest loss term value", ["phase", "term"], registry=REGISTRY
)

SEQUENCES_ENCODED = Counter(
    "effirlab_sequences_encoded_total", "Sequences run through the encoder", ["side"], registry=REGISTRY
)

ENCODE_LATENCY = Histogram(
    "effirlab_encode_batch_seconds",
    "Wall-clock time of one timed benchmark repetition",
    ["model", "side"],
    buckets=(0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0),
    registry=REGISTRY,
)

CALIBRATION_POSITIONS_SKIPPED = Counter(
    "effirlab_calibration_positions_skipped_total",
    "Token positions skipped during importance scoring (zero-norm hidden state)",
    registry=REGISTRY,
)


def write_metrics(path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), REGISTRY)
