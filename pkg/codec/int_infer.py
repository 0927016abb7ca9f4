"""
Integer datapath simulation of a quantized codec.

Convolutions run on stored integers with 64-bit accumulators and an integer-folded
bias. The producer of an edge requantizes its accumulator straight onto the grid of
the edge's consumer, q = round_half_even(acc · (s_in·s_w / s_out)); ReLU-style and
calibrated clips become integer clamps at that point. GDN keeps its denominator in
real arithmetic, as the float graph does, and requantizes its quotient onto the grid
of the layer it feeds.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from codec.layers import gdn_param_specs
from codec.model import (
    CONV,
    GDN_KINDS,
    IGDN,
    LayerNode,
    SLIM_GDN,
    TCONV,
    ModelGraph,
    UnboundSpecError,
    forward,
    input_spec,
    kernel_spec,
)
from engine.functional import conv2d_raw, conv2d_transpose_raw
from engine.tensor import Tensor, precision
from quant.quantizer import QuantSpec, dequantize, quantize

logger = logging.getLogger("lic-quant.codec.int_infer")


@dataclass
class IntInferResult:
    """Reconstruction, integer latent, and the integer grid values each quantized layer consumed."""
    x_hat: np.ndarray
    y_hat: np.ndarray
    traces: dict[str, np.ndarray] = field(default_factory=dict)
    scales: dict[str, float] = field(default_factory=dict)
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    # GDN quotients on their consumer's grid
    outputs: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class _Edge:
    values: np.ndarray
    # Per-channel real value of one accumulator unit; None when values are already real
    acc_scale: np.ndarray | None = None
    clip_lo: float = -math.inf
    clip_hi: float = math.inf

    def clipped(self, lo: float, hi: float) -> "_Edge":
        return _Edge(self.values, self.acc_scale, max(self.clip_lo, lo), min(self.clip_hi, hi))

    def real(self) -> np.ndarray:
        values = self.values if self.acc_scale is None else self.values * self.acc_scale.reshape(1, -1, 1, 1)
        return np.clip(values, self.clip_lo, self.clip_hi)


def integer_conv(
        q_x: np.ndarray,
        q_w: np.ndarray,
        stride: int,
        pad: int,
        transpose: bool = False,
        bias_q: np.ndarray | None = None,
) -> np.ndarray:
    """
    Exact integer (transposed) convolution with int64 accumulation.

    :param q_x: Integer input [N, C_in, H, W].
    :param q_w: Integer kernel, conv or tconv layout.
    :param int stride: Stride.
    :param int pad: Padding.
    :param bool transpose: Transposed convolution.
    :param bias_q: Integer bias per output channel, in accumulator units.
    :return: int64 accumulators.
    :rtype: np.ndarray
    """
    q_x = np.asarray(q_x, dtype=np.int64)
    q_w = np.asarray(q_w, dtype=np.int64)
    acc = conv2d_transpose_raw(q_x, q_w, stride, pad) if transpose else conv2d_raw(q_x, q_w, stride, pad)
    if bias_q is not None:
        acc = acc + np.asarray(bias_q, dtype=np.int64).reshape(1, -1, 1, 1)
    return acc


def requantize(edge: _Edge, spec: QuantSpec) -> np.ndarray:
    """Map an edge onto a per-tensor grid, applying its pending clip as integer bounds."""
    scale = float(spec.scale)
    if edge.acc_scale is None:
        q = np.rint(edge.values / scale)
    else:
        # Combined scale s_in·s_w/s_out in 64-bit real
        q = np.rint(edge.values * (edge.acc_scale / scale).reshape(1, -1, 1, 1))
    lo = spec.qmin if math.isinf(edge.clip_lo) else max(spec.qmin, np.rint(edge.clip_lo / scale))
    hi = spec.qmax if math.isinf(edge.clip_hi) else min(spec.qmax, np.rint(edge.clip_hi / scale))
    return np.clip(q, lo, hi).astype(np.int64)


def check_bound(model: ModelGraph) -> None:
    """
    Verify that every quantized layer has its specs bound.

    :raises: UnboundSpecError naming the first layer that is not.
    """
    if not model.quantized:
        raise UnboundSpecError("model is not quantized; bind bit-widths before integer inference")
    for node in model.quant_layers():
        input_spec(node)
        if node.kind in GDN_KINDS and node.clip is None:
            raise UnboundSpecError(f"layer {node.id} has no calibrated input clip; run calibration first")


def consumer_specs(model: ModelGraph) -> dict[str, QuantSpec]:
    """Input spec of the quantized layer each GDN feeds directly, keyed by the GDN's id."""
    layers = model.layers
    return {node.id: input_spec(after) for node, after in zip(layers, layers[1:])
            if node.kind in GDN_KINDS and after.kind in (CONV, TCONV)}


def _as_batch(image: np.ndarray) -> np.ndarray:
    data = np.asarray(image, dtype=np.float64)
    return data[np.newaxis] if data.ndim == 3 else data


def int_infer(model: ModelGraph, image: np.ndarray) -> IntInferResult:
    """
    Run the quantized model on the integer datapath.

    :param ModelGraph model: Quantized model with bound specs.
    :param np.ndarray image: [3, H, W] or [N, 3, H, W] in [0, 1].
    :return: Reconstruction, integer latent and per-layer integer traces.
    :rtype: IntInferResult

    :raises: UnboundSpecError naming the layer whose spec is missing.
    """
    check_bound(model)
    consumers = consumer_specs(model)
    result = IntInferResult(x_hat=np.empty(0), y_hat=np.empty(0))
    edge = _Edge(_as_batch(image))
    # Scales are derived from 64-bit views of the parameters, matching fake_quant_trace
    with precision(64):
        for node in model.layers:
            match node.kind:
                case "conv" | "tconv":
                    spec_in = input_spec(node)
                    spec_w = kernel_spec(node)
                    q_x = requantize(edge, spec_in)
                    q_w = quantize(node.params["kernel"].data, spec_w)
                    acc_scale = float(spec_in.scale) * spec_w.scale
                    bias_q = np.rint(node.params["bias"].data.astype(np.float64) / acc_scale)
                    acc = integer_conv(q_x, q_w, node.hyper["stride"], node.hyper["pad"],
                                       transpose=node.kind == TCONV, bias_q=bias_q)
                    result.traces[node.id], result.scales[node.id] = q_x, float(spec_in.scale)
                    result.accumulators[node.id] = acc
                    edge = _Edge(acc, acc_scale=acc_scale)
                case "clipped_relu":
                    edge = edge.clipped(0.0, math.inf if node.clip is None else node.clip.theta)
                case "gdn" | "igdn" | "slim_gdn":
                    z = _integer_gdn(node, edge.clipped(node.clip.lo, node.clip.hi), result)
                    spec_out = consumers.get(node.id)
                    if spec_out is None:
                        edge = _Edge(z)
                    else:
                        q_z = requantize(_Edge(z), spec_out)
                        result.outputs[node.id] = q_z
                        edge = _Edge(q_z, acc_scale=np.full(q_z.shape[1], float(spec_out.scale)))
                case "quant_stub":
                    y_hat = np.rint(edge.real())
                    result.y_hat = y_hat.astype(np.int64)
                    edge = _Edge(y_hat)
    result.x_hat = edge.real()
    return result


def _integer_gdn(node: LayerNode, edge: _Edge, result: IntInferResult) -> np.ndarray:
    p = node.gdn_params()
    spec_x = input_spec(node)
    spec_gamma, spec_beta = gdn_param_specs(p, node.bits)
    s_x = float(spec_x.scale)
    q_x = requantize(edge, spec_x)
    q_gamma = quantize(p.gamma().data, spec_gamma)
    beta_q = np.maximum(dequantize(quantize(p.beta().data, spec_beta), spec_beta), float(spec_beta.scale))
    channels = p.channels
    acc = integer_conv(np.abs(q_x), q_gamma.reshape(channels, channels, 1, 1), 1, 0)
    denominator = acc * (s_x * spec_gamma.scale).reshape(1, -1, 1, 1) + beta_q.reshape(1, -1, 1, 1)
    numerator = q_x * s_x
    z = numerator * denominator if node.kind == IGDN else numerator / denominator
    if node.kind == SLIM_GDN:
        a = p.scale.data.astype(np.float64).reshape(1, -1, 1, 1)
        b = p.bias.data.astype(np.float64).reshape(1, -1, 1, 1)
        z = a * z + b
    result.traces[node.id], result.scales[node.id] = q_x, s_x
    result.accumulators[node.id] = acc
    return z


def fake_quant_trace(model: ModelGraph, image: np.ndarray) -> IntInferResult:
    """
    64-bit fake-quant simulation recording the grid values each quantized layer sees.

    :param ModelGraph model: Quantized model with bound specs.
    :param np.ndarray image: [3, H, W] or [N, 3, H, W] in [0, 1].
    :return: Float reconstruction and per-layer integer grid values.
    :rtype: IntInferResult
    """
    check_bound(model)
    result = IntInferResult(x_hat=np.empty(0), y_hat=np.empty(0))

    def record(node, x: Tensor) -> None:
        if node.kind not in (CONV, TCONV) + GDN_KINDS:
            return
        spec = input_spec(node)
        data = x.data
        if node.kind in GDN_KINDS:
            data = np.clip(data, node.clip.lo, node.clip.hi)
        result.traces[node.id] = quantize(data, spec)
        result.scales[node.id] = float(spec.scale)

    with precision(64):
        out = forward(model, Tensor(_as_batch(image)), observer=record)
    result.x_hat = out.x_hat.data.astype(np.float64)
    result.y_hat = out.y_hat.data.astype(np.int64)
    return result


def max_trace_difference(a: IntInferResult, b: IntInferResult) -> dict[str, int]:
    """Per layer, the largest elementwise difference between two traces in grid steps."""
    return {layer: int(np.max(np.abs(a.traces[layer] - b.traces[layer]), initial=0))
            for layer in a.traces if layer in b.traces}
