"""
Distribution diagnostics: heavy-tail statistics of activations and weights, a seeded
heavy-tailed test distribution, and the per-layer calibration report.
"""
import logging
from typing import Any

import numpy as np
from scipy import stats as scipy_stats

from codec.model import CONV, EVAL, GDN_KINDS, TCONV, CLIPPED_RELU, LayerNode, ModelGraph, forward
from draq.calibration import CalibStats, CalibrationError
from engine.prng import Xoshiro256
from engine.tensor import Tensor

logger = logging.getLogger("lic-quant.draq.analysis")

OUTLIER_SIGMAS = 4.0

SUMMARY_COLUMNS = ["min", "max", "mean", "std", "kurtosis", "range_over_std", "outlier_fraction"]
DISTRIBUTION_COLUMNS = ["tensor", "layer"] + SUMMARY_COLUMNS
CALIBRATION_COLUMNS = ["layer", "mu", "sigma", "clip_lo", "clip_hi", "theta_min", "theta_max"]


def tensor_summary(x: np.ndarray) -> dict[str, float]:
    """
    Heavy-tail diagnostics of one tensor.

    ``kurtosis`` is the excess kurtosis (0 for a Gaussian); ``outlier_fraction`` counts
    entries more than 4σ from the mean.

    :param np.ndarray x: Values.
    :return: Summary keyed by SUMMARY_COLUMNS.
    :rtype: dict[str, float]
    """
    data = np.asarray(x, dtype=np.float64).ravel()
    if data.size == 0:
        raise ValueError("cannot summarize an empty tensor")
    mean = float(np.mean(data))
    std = float(np.std(data))
    spread = float(np.max(data) - np.min(data))
    return {
        "min": float(np.min(data)),
        "max": float(np.max(data)),
        "mean": mean,
        "std": std,
        "kurtosis": float(scipy_stats.kurtosis(data, fisher=True)) if std > 0 else 0.0,
        "range_over_std": spread / std if std > 0 else 0.0,
        "outlier_fraction": float(np.mean(np.abs(data - mean) > OUTLIER_SIGMAS * std)) if std > 0 else 0.0,
    }


def heavy_tailed_sample(
        count: int,
        rng: Xoshiro256,
        outlier_fraction: float = 0.001,
        outlier_value: float = 50.0,
) -> np.ndarray:
    """
    Standard normal sample with planted outliers at ±outlier_value, alternating sign,
    at positions drawn from the same generator.
    """
    sample = rng.normal(count)
    planted = int(round(count * outlier_fraction))
    if planted:
        positions = np.argsort(rng.random(count), kind="stable")[:planted]
        sample[positions] = outlier_value * np.where(np.arange(planted) % 2 == 0, 1.0, -1.0)
    return sample


def _monitored(node: LayerNode) -> bool:
    return node.kind in (CONV, TCONV, CLIPPED_RELU) + GDN_KINDS


def distribution_report(model: ModelGraph, calib_set: list[np.ndarray]) -> list[dict[str, Any]]:
    """
    One row per monitored activation (the tensor a layer consumes) and per weight tensor.

    :raises: CalibrationError on an empty calibration set.
    """
    if not calib_set:
        raise CalibrationError("calibration set is empty")
    captured: dict[str, list[np.ndarray]] = {}

    def observe(node: LayerNode, x: Tensor) -> None:
        if _monitored(node):
            captured.setdefault(node.id, []).append(x.data.ravel())

    for image in calib_set:
        forward(model, Tensor(np.asarray(image)[np.newaxis]), mode=EVAL, observer=observe)
    rows = []
    for layer, chunks in captured.items():
        rows.append({"tensor": "activation", "layer": layer, **tensor_summary(np.concatenate(chunks))})
    for layer in model.layers:
        if layer.kind in (CONV, TCONV):
            rows.append({"tensor": "weight", "layer": layer.id, **tensor_summary(layer.params["kernel"].data)})
    return rows


def calibration_report(model: ModelGraph, stats: CalibStats) -> list[dict[str, Any]]:
    """Rows of (layer, μ, σ, clip bounds, weight thresholds); blanks where a layer has none."""
    rows = []
    for layer in model.layers:
        observed = stats.activations.get(layer.id)
        if observed is None or not _monitored(layer):
            continue
        clip = layer.clip if layer.kind == CLIPPED_RELU or layer.kind in GDN_KINDS else None
        theta_min, theta_max = stats.weights.get(layer.id, ("", ""))
        rows.append({
            "layer": layer.id,
            "mu": observed.mean,
            "sigma": observed.std,
            "clip_lo": "" if clip is None else clip.lo,
            "clip_hi": "" if clip is None else clip.hi,
            "theta_min": theta_min,
            "theta_max": theta_max,
        })
    return rows
