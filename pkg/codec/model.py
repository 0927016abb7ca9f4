"""
Toy learned image codec: a strided conv analysis transform, a rounded latent, a
transposed-conv synthesis transform and a factorized entropy proxy.

Layers are kept as an ordered list of LayerNode records. Every conv, tconv and
GDN-family node owns the quantizer of the edge it consumes (one activation quantizer
per inter-layer edge).
"""
import copy
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Any, Callable

import numpy as np

from codec.entropy import EntropyProxy, latent_quantize_eval, latent_quantize_train, rate_estimate
from codec.layers import (
    ClipParams,
    GdnParams,
    SlimGdnParams,
    clipped_relu,
    gdn_forward,
    gdn_param_specs,
    igdn_forward,
    quantized_gdn_forward,
    quantized_slim_gdn_forward,
    slim_gdn_forward,
)
from engine import functional as F
from engine.prng import Xoshiro256, derive_seed
from engine.tensor import ShapeError, Tensor, parameter
from quant.quantizer import SIGNED, UNSIGNED, QuantSpec, fake_quant, make_spec, weight_spec

logger = logging.getLogger("lic-quant.codec.model")

CONV = "conv"
TCONV = "tconv"
CLIPPED_RELU = "clipped_relu"
GDN = "gdn"
IGDN = "igdn"
SLIM_GDN = "slim_gdn"
QUANT_STUB = "quant_stub"
LAYER_KINDS = (CONV, TCONV, CLIPPED_RELU, GDN, IGDN, SLIM_GDN, QUANT_STUB)
GDN_KINDS = (GDN, IGDN, SLIM_GDN)
WEIGHT_KINDS = (CONV, TCONV) + GDN_KINDS

KERNEL = 4
STRIDE = 2
PAD = 1
MIN_DEPTH, MAX_DEPTH = 2, 4
MIN_CHANNELS = 4

TRAIN = "train"
EVAL = "eval"

LATENT_ID = "latent"


class ModelConfigError(Exception):
    """Raised when a model configuration is invalid."""
    pass


class UnboundSpecError(Exception):
    """Raised when a quantized layer is run without a bound quantization spec."""
    pass


@dataclass
class ModelConfig:
    N: int = 16
    M: int = 24
    depth: int = 2
    activation: str = "relu"
    slim: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        reasons = []
        if not isinstance(self.depth, int) or not MIN_DEPTH <= self.depth <= MAX_DEPTH:
            reasons.append(f"depth must be an integer in [{MIN_DEPTH}, {MAX_DEPTH}], got {self.depth}")
        for name in ("N", "M"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < MIN_CHANNELS:
                reasons.append(f"{name} must be an integer >= {MIN_CHANNELS}, got {value}")
        if self.activation not in ("relu", "gdn"):
            reasons.append(f"activation must be 'relu' or 'gdn', got {self.activation!r}")
        if self.slim and self.activation != "gdn":
            reasons.append("slim requires activation 'gdn'")
        if reasons:
            raise ModelConfigError("; ".join(reasons))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class LayerNode:
    """
    One layer of the codec.

    ``hyper`` holds in/out channels and, for convolutions, kernel, stride and pad.
    ``bits`` is the layer's bit-width (weights and consumed activation) once the model
    is quantized; ``act_range`` is the calibrated real range of the consumed edge.
    """
    id: str
    kind: str
    hyper: dict[str, Any]
    params: dict[str, Tensor] = field(default_factory=dict)
    bits: int | None = None
    act_range: tuple[float, float] | None = None
    act_signedness: str = SIGNED
    clip: ClipParams | None = None

    @property
    def in_channels(self) -> int:
        return self.hyper["in_channels"]

    @property
    def out_channels(self) -> int:
        return self.hyper["out_channels"]

    @property
    def latent_input(self) -> bool:
        return bool(self.hyper.get("latent_input", False))

    def gdn_params(self) -> GdnParams:
        """View over the node's parameter tensors (shared, not copied)."""
        if self.kind == SLIM_GDN:
            return SlimGdnParams(self.params["raw_beta"], self.params["raw_gamma"],
                                 self.params["scale"], self.params["bias"])
        return GdnParams(self.params["raw_beta"], self.params["raw_gamma"])


@dataclass
class ModelGraph:
    config: ModelConfig
    layers: list[LayerNode]
    entropy: EntropyProxy
    quantized: bool = False

    def node(self, node_id: str) -> LayerNode:
        for layer in self.layers:
            if layer.id == node_id:
                return layer
        raise KeyError(f"no layer named {node_id!r}")

    def index(self, node_id: str) -> int:
        return [layer.id for layer in self.layers].index(node_id)

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors keyed by '<layer id>.<name>' in layer order."""
        params = {}
        for layer in self.layers:
            for name, tensor in layer.params.items():
                params[f"{layer.id}.{name}"] = tensor
        for name, tensor in self.entropy.parameters().items():
            params[f"entropy.{name}"] = tensor
        return params

    def quant_layers(self) -> list[LayerNode]:
        """Layers that carry a bit-width (conv, tconv and GDN family)."""
        return [layer for layer in self.layers if layer.kind in WEIGHT_KINDS]

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.parameters().values())

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def validate(self) -> None:
        """
        Check that adjacent layers agree on channel counts and that the latent stub
        sits between the two transforms.

        :raises: ModelConfigError describing the first inconsistency.
        """
        channels = 3
        seen_latent = False
        for layer in self.layers:
            if layer.in_channels != channels:
                raise ModelConfigError(f"layer {layer.id} expects {layer.in_channels} channels "
                                       f"but receives {channels}")
            channels = layer.out_channels
            if layer.kind == QUANT_STUB:
                seen_latent = True
                if channels != self.config.M:
                    raise ModelConfigError(f"latent has {channels} channels, expected M={self.config.M}")
        if not seen_latent or channels != 3:
            raise ModelConfigError("model must contain a latent stub and reconstruct 3 channels")
        if self.entropy.channels != self.config.M:
            raise ModelConfigError(f"entropy proxy covers {self.entropy.channels} channels, expected {self.config.M}")


@dataclass
class CodecOutput:
    x_hat: Tensor
    y: Tensor
    y_hat: Tensor
    rate_bits: Tensor

    def bpp(self, num_pixels: int) -> Tensor:
        return self.rate_bits * (1.0 / num_pixels)


def _conv_node(node_id: str, kind: str, c_in: int, c_out: int, rng: Xoshiro256) -> LayerNode:
    # He-uniform on the number of taps that reach one output
    fan_in = c_in * KERNEL * KERNEL
    if kind == TCONV:
        fan_in //= STRIDE * STRIDE
    bound = math.sqrt(6.0 / fan_in)
    shape = (c_out, c_in, KERNEL, KERNEL) if kind == CONV else (c_in, c_out, KERNEL, KERNEL)
    return LayerNode(
        id=node_id,
        kind=kind,
        hyper={"in_channels": c_in, "out_channels": c_out, "kernel": KERNEL, "stride": STRIDE, "pad": PAD},
        params={
            "kernel": parameter(rng.uniform(shape, -bound, bound), name=f"{node_id}.kernel"),
            "bias": parameter(np.zeros(c_out), name=f"{node_id}.bias"),
        },
    )


def _activation_node(node_id: str, kind: str, channels: int) -> LayerNode:
    node = LayerNode(id=node_id, kind=kind, hyper={"in_channels": channels, "out_channels": channels})
    match kind:
        case "gdn" | "igdn":
            node.params = GdnParams.initial(channels).parameters()
        case "slim_gdn":
            node.params = SlimGdnParams.initial(channels).parameters()
    return node


def build_model(cfg: ModelConfig | dict[str, Any]) -> ModelGraph:
    """
    Build a codec from its configuration.

    The analysis transform has ``depth`` stride-2 convolutions with an activation
    between consecutive ones; the last one emits M channels. The synthesis transform
    mirrors it with transposed convolutions and inverse activations.

    :param cfg: ModelConfig or a dict of its fields.
    :return: A freshly initialized model.
    :rtype: ModelGraph

    :raises: ModelConfigError on an invalid configuration.
    """
    if isinstance(cfg, dict):
        try:
            cfg = ModelConfig(**cfg)
        except TypeError as e:
            raise ModelConfigError(str(e)) from e

    forward_act = {"relu": CLIPPED_RELU, "gdn": SLIM_GDN if cfg.slim else GDN}[cfg.activation]
    inverse_act = {"relu": CLIPPED_RELU, "gdn": IGDN}[cfg.activation]

    def rng_for(node_id: str) -> Xoshiro256:
        return Xoshiro256(derive_seed(cfg.seed, "init", node_id))

    layers = []
    widths = [3] + [cfg.N] * (cfg.depth - 1) + [cfg.M]
    for i in range(cfg.depth):
        node_id = f"g_a.conv{i}"
        layers.append(_conv_node(node_id, CONV, widths[i], widths[i + 1], rng_for(node_id)))
        if i < cfg.depth - 1:
            layers.append(_activation_node(f"g_a.act{i}", forward_act, widths[i + 1]))
    layers.append(LayerNode(id=LATENT_ID, kind=QUANT_STUB, hyper={"in_channels": cfg.M, "out_channels": cfg.M}))
    widths = widths[::-1]
    for i in range(cfg.depth):
        node_id = f"g_s.tconv{i}"
        node = _conv_node(node_id, TCONV, widths[i], widths[i + 1], rng_for(node_id))
        if i == 0:
            node.hyper["latent_input"] = True
        layers.append(node)
        if i < cfg.depth - 1:
            layers.append(_activation_node(f"g_s.act{i}", inverse_act, widths[i + 1]))

    model = ModelGraph(config=cfg, layers=layers, entropy=EntropyProxy.initial(cfg.M))
    model.validate()
    logger.info(f"Built {cfg.activation} codec depth={cfg.depth} N={cfg.N} M={cfg.M} "
                f"with {model.parameter_count()} parameters")
    return model


def set_bit_widths(model: ModelGraph, bits: int | dict[str, int]) -> None:
    """
    Mark the model as quantized and assign bit-widths to its quantized layers.

    :param model: Model to update in place.
    :param bits: One width for every layer, or a per-layer mapping covering every
        quantized layer.
    """
    for layer in model.quant_layers():
        if isinstance(bits, int):
            layer.bits = bits
        elif layer.id in bits:
            layer.bits = int(bits[layer.id])
        else:
            raise UnboundSpecError(f"no bit-width given for layer {layer.id}")
    model.quantized = True


def input_spec(node: LayerNode) -> QuantSpec:
    """
    The activation spec of the edge a layer consumes.

    Signed edges are symmetric over max(|lo|, |hi|); unsigned edges cover [0, hi]. The
    rounded latent is already integer, so its consumer uses a unit scale.

    :raises: UnboundSpecError naming the layer when no width or range is bound.
    """
    if node.bits is None:
        raise UnboundSpecError(f"layer {node.id} has no bit-width; quantize the model first")
    if node.latent_input:
        return QuantSpec(node.bits, SIGNED, np.float64(1.0))
    if node.act_range is None:
        raise UnboundSpecError(f"layer {node.id} has no calibrated activation range; run calibration first")
    lo, hi = node.act_range
    if node.act_signedness == UNSIGNED:
        return make_spec(0.0, max(hi, 0.0), node.bits, UNSIGNED)
    peak = max(abs(lo), abs(hi))
    return make_spec(-peak, peak, node.bits, SIGNED)


def kernel_spec(node: LayerNode) -> QuantSpec:
    """Per-output-channel symmetric spec of a conv (axis 0) or tconv (axis 1) kernel."""
    if node.bits is None:
        raise UnboundSpecError(f"layer {node.id} has no bit-width; quantize the model first")
    axis = 0 if node.kind == CONV else 1
    return weight_spec(node.params["kernel"].data, node.bits, axis=axis)


def _run_node(model: ModelGraph, node: LayerNode, x: Tensor, mode: str, rng: Xoshiro256 | None) -> Tensor:
    quantized = model.quantized
    match node.kind:
        case "conv" | "tconv":
            kernel = node.params["kernel"]
            if quantized:
                x = fake_quant(x, input_spec(node))
                kernel = fake_quant(kernel, kernel_spec(node))
            op = F.conv2d if node.kind == CONV else F.conv2d_transpose
            return op(x, kernel, node.params["bias"], stride=node.hyper["stride"], pad=node.hyper["pad"])
        case "clipped_relu":
            return clipped_relu(x, math.inf if node.clip is None else node.clip.theta)
        case "gdn" | "igdn" | "slim_gdn":
            p = node.gdn_params()
            if not quantized:
                return {GDN: gdn_forward, IGDN: igdn_forward, SLIM_GDN: slim_gdn_forward}[node.kind](x, p)
            spec_gamma, spec_beta = gdn_param_specs(p, node.bits)
            if node.kind == SLIM_GDN:
                return quantized_slim_gdn_forward(x, p, input_spec(node), spec_gamma, spec_beta, node.clip)
            return quantized_gdn_forward(x, p, input_spec(node), spec_gamma, spec_beta, node.clip,
                                         inverse=node.kind == IGDN)
        case "quant_stub":
            if mode == TRAIN:
                if rng is None:
                    raise ValueError("training-mode forward needs a noise generator")
                return latent_quantize_train(x, rng)
            return latent_quantize_eval(x)
    raise ModelConfigError(f"unknown layer kind {node.kind!r} at {node.id}")


def forward(
        model: ModelGraph,
        x: Tensor | np.ndarray,
        mode: str = EVAL,
        rng: Xoshiro256 | None = None,
        observer: Callable[[LayerNode, Tensor], None] | None = None,
) -> CodecOutput:
    """
    Run the codec on a batch.

    :param ModelGraph model: The model.
    :param x: Images [N, 3, H, W] in [0, 1]; H and W divisible by 2**depth.
    :param str mode: "train" (noisy latent) or "eval" (rounded latent).
    :param rng: Noise generator, required in train mode.
    :param observer: Called with every node and the tensor that node consumes.
    :return: Reconstruction, latents and estimated rate in bits.
    :rtype: CodecOutput

    :raises: ShapeError on a non-divisible input size.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    factor = STRIDE ** model.config.depth
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(f"codec input must be [N, 3, H, W] with H, W divisible by {factor}, got {x.shape}")
    y = y_hat = None
    h = x
    for node in model.layers:
        if observer is not None:
            observer(node, h)
        out = _run_node(model, node, h, mode, rng)
        if node.kind == QUANT_STUB:
            y, y_hat = h, out
        h = out
    return CodecOutput(x_hat=h, y=y, y_hat=y_hat, rate_bits=rate_estimate(y_hat, model.entropy))
