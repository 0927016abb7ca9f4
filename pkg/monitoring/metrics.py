import os
import logging
from pathlib import Path

from dotenv import load_dotenv
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

logger = logging.getLogger("lic-quant.monitoring.metrics")

load_dotenv()

METRICS_FILE = os.getenv("LIC_QUANT_METRICS_FILE", "metrics.prom")

# Dedicated registry, not the process-wide default
registry = CollectorRegistry()

# Stage metrics
stage_runs = Counter("stage_runs_total", "Pipeline stage runs", ["stage", "status"], registry=registry)
stage_latency = Histogram("stage_latency_seconds", "Pipeline stage duration", ["stage"], registry=registry,
                          buckets=(0.1, 0.5, 1, 5, 15, 60, 300, 900, 1800, 3600))

# Training metrics
training_loss = Gauge("training_loss", "Latest training loss", ["stage"], registry=registry)
training_iterations = Counter("training_iterations_total", "Training iterations run", ["stage"], registry=registry)

# Search and slimming
search_steps = Counter("search_steps_total", "Mixed-precision search evaluations", ["accepted"], registry=registry)
layer_msqe = Gauge("layer_msqe", "Per-layer quantization MSQE", ["layer", "kind"], registry=registry)
pruned_channels = Gauge("pruned_channels", "Channels removed by pruning", ["layer"], registry=registry)


def record_training(stage: str, losses: list[float]) -> None:
    """
    Records a finished training loop.

    :param str stage: The stage that trained.
    :param list[float] losses: Per-iteration losses.
    :return: None
    :rtype: None
    """
    if not losses:
        return
    training_iterations.labels(stage=stage).inc(len(losses))
    training_loss.labels(stage=stage).set(losses[-1])


def record_search_steps(rows: list[dict]) -> None:
    for row in rows:
        search_steps.labels(accepted=str(bool(row["accepted"]))).inc()


def record_msqe(rows: list[dict]) -> None:
    for row in rows:
        layer_msqe.labels(layer=row["layer"], kind="weight").set(row["weight_msqe"])
        layer_msqe.labels(layer=row["layer"], kind="activation").set(row["activation_msqe"])


def record_pruning(channels_before: dict[str, int], channels_after: dict[str, int]) -> None:
    for layer, before in channels_before.items():
        pruned_channels.labels(layer=layer).set(before - channels_after[layer])


def export_metrics(out_dir: str | Path) -> Path:
    """
    Writes the registry in the Prometheus text format.

    :param out_dir: Directory receiving the metrics file.
    :return: Path of the written file.
    :rtype: Path
    """
    path = Path(out_dir) / METRICS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), registry)
    logger.info(f"Exported metrics to {path}")
    return path
