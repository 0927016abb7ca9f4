"""
Static shape propagation and FLOPs accounting.

Counting convention:
    conv / tconv    2·H_out·W_out·C_out·C_in·kH·kW, plus H_out·W_out·C_out for the bias
    GDN / IGDN      the 1×1 denominator convolution with its β bias, plus 2·C·H·W for
                    the absolute value and the divide (or multiply)
    slim GDN        GDN plus 2·C·H·W for the channel affine
    ClippedReLU     1 per element
    latent stub     0
"""
import logging
from dataclasses import dataclass, field

from codec.model import CONV, SLIM_GDN, TCONV, LayerNode, ModelGraph

logger = logging.getLogger("lic-quant.hwopt.flops")


@dataclass(frozen=True)
class LayerShape:
    in_channels: int
    in_h: int
    in_w: int
    out_channels: int
    out_h: int
    out_w: int

    @property
    def out_elements(self) -> int:
        return self.out_channels * self.out_h * self.out_w


@dataclass
class FlopsReport:
    per_layer: dict[str, int] = field(default_factory=dict)
    total: int = 0
    per_pixel: float = 0.0


def layer_shapes(model: ModelGraph, input_hw: tuple[int, int]) -> dict[str, LayerShape]:
    """Input and output shape of every layer for an input of spatial size ``input_hw``."""
    h, w = input_hw
    shapes = {}
    for node in model.layers:
        out_h, out_w = h, w
        if node.kind in (CONV, TCONV):
            k, s, p = node.hyper["kernel"], node.hyper["stride"], node.hyper["pad"]
            if node.kind == CONV:
                out_h, out_w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            else:
                out_h, out_w = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
        shapes[node.id] = LayerShape(node.in_channels, h, w, node.out_channels, out_h, out_w)
        h, w = out_h, out_w
    return shapes


def layer_flops(node: LayerNode, shape: LayerShape) -> int:
    pixels_out = shape.out_h * shape.out_w
    match node.kind:
        case "conv" | "tconv":
            k = node.hyper["kernel"]
            macs = 2 * pixels_out * shape.out_channels * shape.in_channels * k * k
            bias = pixels_out * shape.out_channels if "bias" in node.params else 0
            return macs + bias
        case "gdn" | "igdn" | "slim_gdn":
            c, pixels = shape.in_channels, shape.in_h * shape.in_w
            count = 2 * pixels * c * c + pixels * c + 2 * c * pixels
            if node.kind == SLIM_GDN:
                count += 2 * c * pixels
            return count
        case "clipped_relu":
            return shape.in_channels * shape.in_h * shape.in_w
        case "quant_stub":
            return 0
    raise ValueError(f"unknown layer kind {node.kind!r}")


def flops_count(model: ModelGraph, input_shape: tuple[int, int]) -> FlopsReport:
    """
    Per-layer and total FLOPs for one image of spatial size ``input_shape``.

    :param ModelGraph model: Model with static shapes.
    :param input_shape: (H, W) of the input image.
    :return: Counts per layer, total, and total per input pixel.
    :rtype: FlopsReport
    """
    h, w = input_shape
    shapes = layer_shapes(model, input_shape)
    report = FlopsReport()
    for node in model.layers:
        report.per_layer[node.id] = layer_flops(node, shapes[node.id])
    report.total = sum(report.per_layer.values())
    report.per_pixel = report.total / (h * w)
    logger.debug(f"{report.total} FLOPs over {len(report.per_layer)} layers for a {h}x{w} input "
                 f"({report.per_pixel:.2f} per pixel)")
    return report


def flops_rows(report: FlopsReport) -> list[dict[str, int | float | str]]:
    rows = [{"layer": layer, "flops": count} for layer, count in report.per_layer.items()]
    rows.append({"layer": "total", "flops": report.total})
    rows.append({"layer": "per_pixel", "flops": report.per_pixel})
    return rows
