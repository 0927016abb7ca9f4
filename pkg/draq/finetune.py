"""
DRAQ fine-tuning: quantization-aware training with calibrated activation clips, a
penalty on weights outside their percentile thresholds, and periodic recalibration.
"""
import logging
from dataclasses import dataclass, field, asdict
from typing import Any

import numpy as np

from codec.model import CONV, TCONV, ModelGraph
from codec.train import TrainConfig, TrainResult, train
from draq.calibration import (
    DEFAULT_ALPHA,
    CalibrationError,
    CalibStats,
    calibrate,
    calibration_subset,
    k_from_lambda,
)
from engine import functional as F
from engine.tensor import Tensor

logger = logging.getLogger("lic-quant.draq.finetune")

DEFAULT_REG_STRENGTH = 1e-3
RECALIBRATIONS_PER_RUN = 10


@dataclass
class DraqConfig:
    """
    Fine-tuning settings. ``recalib_period`` defaults to a tenth of the run.
    Turning both ``clip_activations`` and ``regularize_weights`` off gives plain QAT.
    ``bits=None`` keeps the per-layer widths already set on the model.
    """
    alpha: float = DEFAULT_ALPHA
    k_override: float | None = None
    reg_strength: float = DEFAULT_REG_STRENGTH
    recalib_period: int | None = None
    clip_activations: bool = True
    regularize_weights: bool = True
    bits: int | None = 8

    def __post_init__(self) -> None:
        if self.bits is not None and not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if not 0 < self.alpha < 0.5:
            raise ValueError(f"alpha must be in (0, 0.5), got {self.alpha}")
        if self.recalib_period is not None and self.recalib_period < 1:
            raise ValueError(f"recalib_period must be >= 1, got {self.recalib_period}")
        if self.reg_strength < 0:
            raise ValueError(f"reg_strength must be non-negative, got {self.reg_strength}")

    @classmethod
    def baseline(cls, **overrides: Any) -> "DraqConfig":
        return cls(**{"clip_activations": False, "regularize_weights": False, **overrides})

    def period(self, iters: int) -> int:
        if self.recalib_period is not None:
            return self.recalib_period
        return max(1, iters // RECALIBRATIONS_PER_RUN)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class DraqResult:
    model: ModelGraph
    stats: CalibStats
    training: TrainResult
    recalibrations: list[int] = field(default_factory=list)
    outliers_before: float = 0.0
    outliers_after: float = 0.0


def _regularized(model: ModelGraph) -> list:
    return [layer for layer in model.layers if layer.kind in (CONV, TCONV)]


def weight_reg_loss(model: ModelGraph, thresholds: dict[str, tuple[float, float]], reg_strength: float) -> Tensor:
    """
    reg_strength · Σ_layers [Σ_{w > θmax} (w − θmax) + Σ_{w < θmin} (θmin − w)].

    Thresholds are inclusive: a weight exactly on a threshold costs nothing.

    :raises: CalibrationError when a conv or tconv layer has no thresholds.
    """
    total = None
    for layer in _regularized(model):
        if layer.id not in thresholds:
            raise CalibrationError(f"no weight thresholds for layer {layer.id}")
        lo, hi = thresholds[layer.id]
        w = layer.params["kernel"]
        term = F.sum(F.relu(w - hi) + F.relu(lo - w))
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * reg_strength


def outlier_fraction(model: ModelGraph, thresholds: dict[str, tuple[float, float]]) -> float:
    """Fraction of conv/tconv weights strictly outside their thresholds."""
    outside = count = 0
    for layer in _regularized(model):
        lo, hi = thresholds[layer.id]
        w = layer.params["kernel"].data
        outside += int(np.count_nonzero((w < lo) | (w > hi)))
        count += w.size
    return outside / count if count else 0.0


def draq_finetune(
        model: ModelGraph,
        dataset: list[np.ndarray],
        train_cfg: TrainConfig,
        cfg: DraqConfig,
        calib_set: list[np.ndarray] | None = None,
) -> DraqResult:
    """
    Quantize, calibrate once, then fine-tune with fake quantization active.

    Every ``cfg.period(iters)`` iterations the activation clips, the activation specs
    and the weight thresholds are recomputed from the same calibration subset.

    :param ModelGraph model: Pre-trained model, updated in place.
    :param dataset: Training images.
    :param TrainConfig train_cfg: Loop settings (λ, lr, iterations, seed).
    :param DraqConfig cfg: DRAQ settings.
    :param calib_set: Calibration images; the first 64 crops of ``dataset`` by default.
    :return: Model, final statistics, training trace and outlier fractions.
    :rtype: DraqResult

    :raises: TrainingDivergedError on a non-finite loss.
    :raises: CalibrationError when ``cfg.bits`` is None and the model has no bit-widths.
    """
    if cfg.bits is None and not model.quantized:
        raise CalibrationError("bits=None needs a model with per-layer bit-widths already set")
    calib_set = calib_set if calib_set is not None else calibration_subset(dataset, train_cfg.crop)
    k_override = cfg.k_override

    def recalibrate() -> CalibStats:
        return calibrate(model, calib_set, train_cfg.lmbda, cfg.clip_activations, k_override, cfg.alpha, cfg.bits)

    stats = recalibrate()
    initial_thresholds = dict(stats.weights)
    thresholds = dict(stats.weights)
    result = DraqResult(model=model, stats=stats, training=TrainResult(model=model),
                        outliers_before=outlier_fraction(model, initial_thresholds))
    period = cfg.period(train_cfg.iters)

    def on_step(i: int, _: ModelGraph) -> None:
        if i == 0 or i % period:
            return
        result.stats = recalibrate()
        thresholds.clear()
        thresholds.update(result.stats.weights)
        result.recalibrations.append(i)
        logger.info(f"Recalibrated clips and weight thresholds at iteration {i}")

    extra_loss = None
    if cfg.regularize_weights:
        def extra_loss(m: ModelGraph) -> Tensor:
            return weight_reg_loss(m, thresholds, cfg.reg_strength)

    logger.info(f"DRAQ fine-tune: {cfg.bits}-bit, clip={cfg.clip_activations}, "
                f"reg={cfg.regularize_weights} ({cfg.reg_strength}), k="
                f"{k_override if k_override is not None else k_from_lambda(train_cfg.lmbda)}, period={period}")
    result.training = train(model, dataset, train_cfg, extra_loss=extra_loss, on_step=on_step)
    result.outliers_after = outlier_fraction(model, initial_thresholds)
    logger.info(f"Weight outliers {result.outliers_before:.5f} -> {result.outliers_after:.5f}")
    return result
