"""
Calibration: activation statistics, clip thresholds, weight percentile thresholds and
the binding of activation quantizers from them.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from codec.layers import ClipParams
from codec.model import (
    CLIPPED_RELU,
    CONV,
    EVAL,
    GDN_KINDS,
    TCONV,
    LayerNode,
    ModelGraph,
    forward,
)
from engine.tensor import Tensor
from quant.quantizer import SIGNED, UNSIGNED

logger = logging.getLogger("lic-quant.draq.calibration")

ONE_SIDED = "one_sided"
TWO_SIDED = "two_sided"

CALIBRATION_CROPS = 64
THETA_FLOOR = 1e-6
DEFAULT_ALPHA = 0.001


class CalibrationError(Exception):
    """Raised when calibration data or statistics are missing or unusable."""
    pass


@dataclass
class LayerStats:
    """Population statistics of one monitored tensor, merged across batches in 64-bit."""
    mean: float = 0.0
    std: float = 0.0
    min: float = -math.inf
    max: float = math.inf
    count: int = 0

    @classmethod
    def of(cls, values: np.ndarray) -> "LayerStats":
        data = np.asarray(values, dtype=np.float64).ravel()
        mean = float(np.mean(data))
        return cls(mean=mean, std=float(np.sqrt(np.mean((data - mean) ** 2))),
                   min=float(np.min(data)), max=float(np.max(data)), count=int(data.size))

    def merge(self, other: "LayerStats") -> "LayerStats":
        """Combine two populations (Chan et al. pairwise update of the second moment)."""
        if self.count == 0:
            return other
        if other.count == 0:
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        m2 = self.std ** 2 * self.count + other.std ** 2 * other.count + delta ** 2 * self.count * other.count / total
        return LayerStats(
            mean=self.mean + delta * other.count / total,
            std=math.sqrt(max(m2 / total, 0.0)),
            min=min(self.min, other.min),
            max=max(self.max, other.max),
            count=total,
        )


@dataclass
class CalibStats:
    activations: dict[str, LayerStats] = field(default_factory=dict)
    weights: dict[str, tuple[float, float]] = field(default_factory=dict)
    sample_count: int = 0


def calibration_subset(dataset: list[np.ndarray], crop: int = 16, count: int = CALIBRATION_CROPS) -> list[np.ndarray]:
    """The first ``count`` non-overlapping crops, images in order and crops in raster order."""
    crops = []
    for image in dataset:
        _, h, w = image.shape
        for top in range(0, h - crop + 1, crop):
            for left in range(0, w - crop + 1, crop):
                crops.append(image[:, top:top + crop, left:left + crop])
                if len(crops) == count:
                    return crops
    return crops


def collect_activation_stats(model: ModelGraph, calib_set: list[np.ndarray]) -> CalibStats:
    """
    Statistics of the tensor every layer consumes, over the whole calibration set.

    Images are visited in list order and merged in that order, so results are
    reproducible. The model runs in eval mode in whatever quantization state it is in.

    :param ModelGraph model: Model to observe (read only).
    :param calib_set: Images [3, H, W].
    :return: Activation statistics keyed by layer id.
    :rtype: CalibStats

    :raises: CalibrationError on an empty calibration set.
    """
    if not calib_set:
        raise CalibrationError("calibration set is empty")
    stats = CalibStats(sample_count=len(calib_set))

    def observe(node: LayerNode, x: Tensor) -> None:
        current = stats.activations.get(node.id, LayerStats())
        stats.activations[node.id] = current.merge(LayerStats.of(x.data))

    for image in calib_set:
        forward(model, Tensor(np.asarray(image)[np.newaxis]), mode=EVAL, observer=observe)
    return stats


def k_from_lambda(lmbda: float) -> float:
    """k = 625·λ + 2."""
    if not lmbda > 0:
        raise ValueError(f"lambda must be positive, got {lmbda}")
    return 625.0 * lmbda + 2.0


def clip_threshold(stats: LayerStats, k: float, mode: str, layer: str = "") -> ClipParams:
    """
    Clip bounds of one layer from μ ± kσ, never outside the observed min/max.
    An infinite k gives unbounded clips.

    :param LayerStats stats: Statistics of the tensor the clip consumes.
    :param float k: Multiplier of σ.
    :param str mode: "one_sided" (θ = μ + kσ) or "two_sided" ((μ − kσ, μ + kσ)).
    :param str layer: Layer id used in warnings.
    :return: Clip bounds.
    :rtype: ClipParams
    """
    if math.isinf(k):
        return ClipParams.from_theta(math.inf) if mode == ONE_SIDED else ClipParams.unbounded()
    upper = min(stats.mean + k * stats.std, stats.max)
    match mode:
        case "one_sided":
            if upper < THETA_FLOOR:
                logger.warning(f"Degenerate activation statistics for layer {layer} "
                               f"(mean={stats.mean}, std={stats.std}); theta floored at {THETA_FLOOR}")
            return ClipParams.from_theta(max(upper, THETA_FLOOR))
        case "two_sided":
            lower = max(stats.mean - k * stats.std, stats.min)
            if upper - lower < THETA_FLOOR:
                logger.warning(f"Degenerate activation statistics for layer {layer} "
                               f"(mean={stats.mean}, std={stats.std}); widening clip to {THETA_FLOOR}")
                center = (upper + lower) / 2
                lower, upper = center - THETA_FLOOR / 2, center + THETA_FLOOR / 2
            return ClipParams(lower, upper)
    raise ValueError(f"unknown clip mode {mode!r}")


def clip_thresholds(
        stats: CalibStats,
        lmbda: float,
        mode: str,
        layers: list[str] | None = None,
        k_override: float | None = None,
) -> dict[str, ClipParams]:
    """
    Clip bounds for every listed layer (all layers with statistics by default).

    :param CalibStats stats: Activation statistics.
    :param float lmbda: RD trade-off; k = 625·λ + 2 unless ``k_override`` is given.
    :param str mode: "one_sided" or "two_sided".
    :param layers: Layer ids.
    :param k_override: Explicit k.
    :return: Clip bounds keyed by layer id.
    :rtype: dict[str, ClipParams]

    :raises: CalibrationError when a listed layer has no statistics.
    """
    k = k_override if k_override is not None else k_from_lambda(lmbda)
    clips = {}
    for layer in layers if layers is not None else list(stats.activations):
        if layer not in stats.activations:
            raise CalibrationError(f"no activation statistics for layer {layer}")
        clips[layer] = clip_threshold(stats.activations[layer], k, mode, layer)
    return clips


def weight_thresholds(weights: np.ndarray, alpha: float = DEFAULT_ALPHA) -> tuple[float, float]:
    """
    The α and 1 − α empirical percentiles of a weight tensor.

    Percentiles interpolate linearly between the closest order statistics. Tensors with
    fewer than 1/α entries fall back to their min and max.

    :param np.ndarray weights: Weights.
    :param float alpha: Outlier fraction per side, 0 < α < 0.5.
    :return: (θ_min, θ_max).
    :rtype: tuple[float, float]
    """
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must be in (0, 0.5), got {alpha}")
    flat = np.asarray(weights, dtype=np.float64).ravel()
    if flat.size < 1.0 / alpha:
        return float(flat.min()), float(flat.max())
    lo, hi = np.quantile(flat, [alpha, 1.0 - alpha], method="linear")
    return float(lo), float(hi)


def model_weight_thresholds(model: ModelGraph, alpha: float = DEFAULT_ALPHA) -> dict[str, tuple[float, float]]:
    """Percentile thresholds of every conv and tconv kernel."""
    return {layer.id: weight_thresholds(layer.params["kernel"].data, alpha)
            for layer in model.layers if layer.kind in (CONV, TCONV)}


def install_clips(
        model: ModelGraph,
        stats: CalibStats,
        lmbda: float,
        clip_activations: bool = True,
        k_override: float | None = None,
) -> None:
    """
    Install one-sided clips on ClippedReLU layers and two-sided clips on GDN-family
    inputs. Without ``clip_activations`` ReLUs stay plain and GDN inputs are unbounded.
    """
    k = k_override if k_override is not None else k_from_lambda(lmbda)
    for layer in model.layers:
        if layer.kind != CLIPPED_RELU and layer.kind not in GDN_KINDS:
            continue
        if not clip_activations:
            layer.clip = None if layer.kind == CLIPPED_RELU else ClipParams.unbounded()
            continue
        if layer.id not in stats.activations:
            raise CalibrationError(f"no activation statistics for layer {layer.id}")
        mode = ONE_SIDED if layer.kind == CLIPPED_RELU else TWO_SIDED
        layer.clip = clip_threshold(stats.activations[layer.id], k, mode, layer.id)


def bind_activation_specs(model: ModelGraph, stats: CalibStats, bits: int | None = None) -> None:
    """
    Derive every inter-layer activation range from statistics and installed clips.

    A conv fed by a ClippedReLU takes [0, θ] unsigned; a GDN-family layer takes its
    clip bounds made symmetric; every other edge takes its observed min/max
    (unsigned when the minimum is non-negative). The rounded latent edge keeps a
    unit scale and needs no range.

    :param ModelGraph model: Model to update in place.
    :param CalibStats stats: Activation statistics.
    :param bits: Bit-width for every quantized layer; when given the model is marked
        quantized.
    :raises: CalibrationError naming a layer without statistics.
    """
    for index, layer in enumerate(model.layers):
        if layer.kind not in (CONV, TCONV) + GDN_KINDS:
            continue
        if bits is not None:
            layer.bits = bits
        if layer.latent_input:
            continue
        observed = stats.activations.get(layer.id)
        if observed is None:
            raise CalibrationError(f"no activation statistics for layer {layer.id}")
        producer = model.layers[index - 1] if index > 0 else None
        if layer.kind in GDN_KINDS:
            clip = layer.clip
            bounded = clip is not None and math.isfinite(clip.lo) and math.isfinite(clip.hi)
            layer.act_range = (clip.lo, clip.hi) if bounded else (observed.min, observed.max)
            layer.act_signedness = SIGNED
        elif producer is not None and producer.kind == CLIPPED_RELU:
            theta = producer.clip.theta if producer.clip is not None else math.inf
            theta = theta if math.isfinite(theta) else observed.max
            layer.act_range = (0.0, theta)
            layer.act_signedness = UNSIGNED
        elif observed.min >= 0:
            layer.act_range = (0.0, observed.max)
            layer.act_signedness = UNSIGNED
        else:
            layer.act_range = (observed.min, observed.max)
            layer.act_signedness = SIGNED
    if bits is not None:
        model.quantized = True


def calibrate(
        model: ModelGraph,
        calib_set: list[np.ndarray],
        lmbda: float,
        clip_activations: bool = True,
        k_override: float | None = None,
        alpha: float = DEFAULT_ALPHA,
        bits: int | None = None,
) -> CalibStats:
    """
    One calibration pass: statistics, clips, weight thresholds and activation specs.

    :return: The statistics, with weight thresholds filled in.
    :rtype: CalibStats
    """
    stats = collect_activation_stats(model, calib_set)
    install_clips(model, stats, lmbda, clip_activations, k_override)
    stats.weights = model_weight_thresholds(model, alpha)
    bind_activation_specs(model, stats, bits)
    logger.info(f"Calibrated {len(stats.activations)} layers on {stats.sample_count} samples")
    return stats
