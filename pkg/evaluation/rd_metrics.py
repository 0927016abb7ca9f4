"""
Rate-distortion metrics: PSNR, RD curves, Bjøntegaard delta rate and per-layer MSQE.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from codec.model import CONV, EVAL, GDN_KINDS, TCONV, LayerNode, ModelGraph, forward, input_spec, kernel_spec
from codec.layers import gdn_param_specs
from engine.tensor import ShapeError, Tensor
from quant.quantizer import MsqeEntry, MsqeReport, QuantSpec, dequantize, msqe, quantize

logger = logging.getLogger("lic-quant.evaluation.rd_metrics")

# Sentinel for a perfect reconstruction; never used as a curve point
PSNR_INF = math.inf
MIN_CURVE_POINTS = 4
MIN_OVERLAP_DB = 1.0

MSQE_COLUMNS = ["layer", "weight_msqe", "activation_msqe"]
BDRATE_COLUMNS = ["reference", "test", "bd_rate"]


class RDCurveError(ValueError):
    """Raised when RD points do not form a valid curve."""
    pass


class BDRateError(Exception):
    """Raised when two curves cannot be compared by BD-rate."""
    pass


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float

    def __post_init__(self) -> None:
        if self.bpp < 0 or math.isnan(self.bpp) or math.isnan(self.psnr):
            raise RDCurveError(f"invalid RD point ({self.bpp}, {self.psnr})")


class RDCurve:
    """At least four RD points, sorted by bpp and strictly increasing in bpp and PSNR."""

    def __init__(self, points: list[RDPoint], label: str = "") -> None:
        points = sorted(points, key=lambda p: p.bpp)
        if len(points) < MIN_CURVE_POINTS:
            raise RDCurveError(f"an RD curve needs at least {MIN_CURVE_POINTS} points, got {len(points)}")
        for p in points:
            if not p.bpp > 0 or not math.isfinite(p.psnr):
                raise RDCurveError(f"curve points need bpp > 0 and finite PSNR, got ({p.bpp}, {p.psnr})")
        for a, b in zip(points, points[1:]):
            if not (b.bpp > a.bpp and b.psnr > a.psnr):
                raise RDCurveError(f"curve is not strictly increasing between ({a.bpp}, {a.psnr}) "
                                   f"and ({b.bpp}, {b.psnr})")
        self.points = points
        self.label = label

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 255.0) -> float:
    """
    10·log10(peak² / MSE).

    :param np.ndarray x: Image.
    :param np.ndarray y: Image of the same shape.
    :param float peak: Peak signal value.
    :return: PSNR in dB; PSNR_INF when the images are identical.
    :rtype: float

    :raises: ShapeError when the shapes differ.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def _integrated_log_rate(curve: RDCurve, lo: float, hi: float) -> float:
    # Cubic least-squares fit of log10(bpp) against PSNR, integrated over [lo, hi]
    fit = np.polyfit(curve.psnr, np.log10(curve.bpp), 3)
    antiderivative = np.polyint(fit)
    return float(np.polyval(antiderivative, hi) - np.polyval(antiderivative, lo))


def bd_rate(reference: RDCurve, test: RDCurve) -> float:
    """
    Bjøntegaard delta rate of ``test`` against ``reference``.

    :param RDCurve reference: Anchor curve.
    :param RDCurve test: Curve under test.
    :return: Average rate difference in percent at equal PSNR; positive means the test
        curve needs more rate.
    :rtype: float

    :raises: BDRateError when the curves overlap by less than 1 dB.
    """
    lo = max(reference.psnr.min(), test.psnr.min())
    hi = min(reference.psnr.max(), test.psnr.max())
    if hi - lo < MIN_OVERLAP_DB:
        raise BDRateError(f"curves overlap on {max(hi - lo, 0.0):.3f} dB, need at least {MIN_OVERLAP_DB} dB")
    difference = (_integrated_log_rate(test, lo, hi) - _integrated_log_rate(reference, lo, hi)) / (hi - lo)
    return (10.0 ** difference - 1.0) * 100.0


def _layer_weight(node: LayerNode) -> tuple[np.ndarray, QuantSpec]:
    if node.kind in GDN_KINDS:
        p = node.gdn_params()
        return p.gamma().data, gdn_param_specs(p, node.bits)[0]
    return node.params["kernel"].data, kernel_spec(node)


def msqe_table(model: ModelGraph, calib_set: list[np.ndarray]) -> MsqeReport:
    """
    Per-layer weight MSQE and activation MSQE of every quantized layer.

    The activation MSQE of a layer is taken over the tensor it consumes across the
    whole calibration set (clamping to the grid range included).

    :param ModelGraph model: Quantized model with bound specs.
    :param calib_set: Images [3, H, W].
    :return: The report, in layer order.
    :rtype: MsqeReport

    :raises: ValueError on an empty calibration set.
    """
    if not calib_set:
        raise ValueError("calibration set is empty")
    squared: dict[str, float] = {}
    counts: dict[str, int] = {}

    def observe(node: LayerNode, x: Tensor) -> None:
        if node.kind not in (CONV, TCONV) + GDN_KINDS:
            return
        data = x.data.astype(np.float64)
        spec = input_spec(node)
        error = data - dequantize(quantize(data, spec), spec)
        squared[node.id] = squared.get(node.id, 0.0) + float(np.sum(error * error))
        counts[node.id] = counts.get(node.id, 0) + data.size

    for image in calib_set:
        forward(model, Tensor(np.asarray(image)[np.newaxis]), mode=EVAL, observer=observe)
    report = MsqeReport()
    for node in model.quant_layers():
        weight, spec = _layer_weight(node)
        report.layers[node.id] = MsqeEntry(weight_msqe=msqe(weight, spec),
                                           activation_msqe=squared[node.id] / counts[node.id])
    return report


def msqe_rows(report: MsqeReport) -> list[dict[str, float | str]]:
    return [{"layer": layer, "weight_msqe": entry.weight_msqe, "activation_msqe": entry.activation_msqe}
            for layer, entry in report.layers.items()]
