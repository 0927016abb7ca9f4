import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from engine.tensor import Function, Tensor, get_dtype

logger = logging.getLogger("lic-quant.quant.quantizer")

SIGNED = "signed"
UNSIGNED = "unsigned"
PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"

MIN_BITS = 2
MAX_BITS = 16
SCALE_FLOOR = 1e-12


class QuantSpecError(Exception):
    """Raised when quantization parameters are invalid."""
    pass


@dataclass(eq=False)
class QuantSpec:
    """
    Zero-point-free integer grid: real value = q · scale, q in [qmin, qmax].

    Per-channel specs hold one scale per slice along ``axis``; per-tensor specs hold a
    0-d scale. Rounding is always round-half-to-even.
    """
    bit_width: int
    signedness: str
    scale: np.ndarray
    axis: int | None = None
    rounding: str = "half_even"

    def __post_init__(self) -> None:
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if not MIN_BITS <= self.bit_width <= MAX_BITS:
            raise QuantSpecError(f"bit_width must be in [{MIN_BITS}, {MAX_BITS}], got {self.bit_width}")
        if self.signedness not in (SIGNED, UNSIGNED):
            raise QuantSpecError(f"unknown signedness {self.signedness!r}")
        if self.axis is None and self.scale.ndim != 0:
            raise QuantSpecError(f"per-tensor spec needs a scalar scale, got shape {self.scale.shape}")
        if self.axis is not None and self.scale.ndim != 1:
            raise QuantSpecError(f"per-channel spec needs a 1-d scale, got shape {self.scale.shape}")
        if not np.all(self.scale > 0) or not np.all(np.isfinite(self.scale)):
            raise QuantSpecError("every scale entry must be positive and finite")

    @property
    def granularity(self) -> str:
        return PER_TENSOR if self.axis is None else PER_CHANNEL

    @property
    def qmin(self) -> int:
        return -(1 << (self.bit_width - 1)) if self.signedness == SIGNED else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bit_width - 1)) - 1 if self.signedness == SIGNED else (1 << self.bit_width) - 1

    @property
    def clip_lo(self) -> np.ndarray:
        return self.scale * self.qmin

    @property
    def clip_hi(self) -> np.ndarray:
        return self.scale * self.qmax

    def broadcast_scale(self, ndim: int) -> np.ndarray:
        """The scale reshaped to broadcast against an ``ndim``-dimensional tensor."""
        if self.axis is None:
            return self.scale
        shape = [1] * ndim
        shape[self.axis] = self.scale.shape[0]
        return self.scale.reshape(shape)

    def with_bits(self, bit_width: int) -> "QuantSpec":
        """Same real range re-gridded at a different bit-width."""
        hi = self.scale * self.qmax
        return make_spec(0.0 if self.signedness == UNSIGNED else -hi, hi, bit_width, self.signedness,
                         self.granularity, self.axis if self.axis is not None else 0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "bit_width": self.bit_width,
            "signedness": self.signedness,
            "granularity": self.granularity,
            "axis": self.axis,
            "scale": self.scale.tolist(),
            "rounding": self.rounding,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "QuantSpec":
        return cls(
            bit_width=int(data["bit_width"]),
            signedness=data["signedness"],
            scale=np.asarray(data["scale"], dtype=np.float64),
            axis=data.get("axis"),
            rounding=data.get("rounding", "half_even"),
        )


@dataclass
class MsqeEntry:
    weight_msqe: float
    activation_msqe: float


@dataclass
class MsqeReport:
    """Per-layer weight and activation MSQE."""
    layers: dict[str, MsqeEntry] = field(default_factory=dict)


def make_spec(
        range_lo: float | np.ndarray,
        range_hi: float | np.ndarray,
        bit_width: int,
        signedness: str = SIGNED,
        granularity: str = PER_TENSOR,
        axis: int = 0,
) -> QuantSpec:
    """
    Derive a QuantSpec from a calibrated real range.

    Signed specs are symmetric: scale = max(|lo|, |hi|) / (2^(b−1) − 1). Unsigned specs
    need lo >= 0 and use scale = hi / (2^b − 1). A degenerate range falls back to a
    1e-12 scale floor.

    :param range_lo: Lower end of the range (scalar, or one entry per channel).
    :param range_hi: Upper end of the range.
    :param int bit_width: Bits, 2..16.
    :param str signedness: "signed" or "unsigned".
    :param str granularity: "per_tensor" or "per_channel".
    :param int axis: Channel axis for per-channel specs.
    :return: The spec.
    :rtype: QuantSpec

    :raises: QuantSpecError on an inverted range or a negative unsigned range.
    """
    lo = np.asarray(range_lo, dtype=np.float64)
    hi = np.asarray(range_hi, dtype=np.float64)
    if np.any(hi < lo):
        raise QuantSpecError(f"range_hi must not be below range_lo, got [{lo}, {hi}]")
    if not MIN_BITS <= bit_width <= MAX_BITS:
        raise QuantSpecError(f"bit_width must be in [{MIN_BITS}, {MAX_BITS}], got {bit_width}")
    match signedness:
        case "signed":
            scale = np.maximum(np.abs(lo), np.abs(hi)) / ((1 << (bit_width - 1)) - 1)
        case "unsigned":
            if np.any(lo < 0):
                raise QuantSpecError(f"unsigned quantization needs range_lo >= 0, got {lo}")
            scale = hi / ((1 << bit_width) - 1)
        case _:
            raise QuantSpecError(f"unknown signedness {signedness!r}")
    scale = np.maximum(scale, SCALE_FLOOR)
    if granularity == PER_TENSOR:
        if scale.ndim != 0:
            raise QuantSpecError("per-tensor spec needs scalar range bounds")
        return QuantSpec(bit_width, signedness, scale)
    if granularity != PER_CHANNEL:
        raise QuantSpecError(f"unknown granularity {granularity!r}")
    return QuantSpec(bit_width, signedness, np.atleast_1d(scale), axis=axis)


def weight_spec(weight: np.ndarray, bit_width: int, axis: int = 0) -> QuantSpec:
    """Per-channel symmetric spec over ``axis`` (the output channels of a kernel)."""
    weight = np.asarray(weight, dtype=np.float64)
    reduce_axes = tuple(a for a in range(weight.ndim) if a != axis)
    peak = np.max(np.abs(weight), axis=reduce_axes) if reduce_axes else np.abs(weight)
    return make_spec(-peak, peak, bit_width, SIGNED, PER_CHANNEL, axis)


def quantize(x: Tensor | np.ndarray, spec: QuantSpec) -> np.ndarray:
    """
    Map real values onto the integer grid.

    :param x: Real values.
    :param QuantSpec spec: Grid.
    :return: q = clamp(round_half_even(x / scale), qmin, qmax) as int64.
    :rtype: np.ndarray
    """
    data = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    q = np.rint(data / spec.broadcast_scale(data.ndim))
    return np.clip(q, spec.qmin, spec.qmax).astype(np.int64)


def dequantize(q: np.ndarray, spec: QuantSpec) -> np.ndarray:
    q = np.asarray(q)
    return q.astype(np.float64) * spec.broadcast_scale(q.ndim)


class FakeQuant(Function):
    """Quantize-dequantize with a clipped straight-through gradient."""

    def forward(self, x, spec: QuantSpec | None = None):
        scale = spec.broadcast_scale(x.ndim)
        wide = x.astype(np.float64)
        self.mask = (wide >= spec.qmin * scale) & (wide <= spec.qmax * scale)
        q = np.clip(np.rint(wide / scale), spec.qmin, spec.qmax)
        return (q * scale).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


def fake_quant(x: Tensor, spec: QuantSpec) -> Tensor:
    """
    Graph node computing dequantize(quantize(x)).

    The backward pass passes the upstream gradient where clip_lo <= x <= clip_hi and
    zero elsewhere.
    """
    return FakeQuant.apply(x, spec=spec)


def fake_quant_array(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Forward-only fake quantization on a plain array."""
    data = np.asarray(x)
    dtype = data.dtype if data.dtype.kind == "f" else get_dtype()
    return dequantize(quantize(data, spec), spec).astype(dtype)


def msqe(x: Tensor | np.ndarray, spec: QuantSpec) -> float:
    """Mean squared quantization error mean((x − fake_quant(x))²)."""
    data = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if data.size == 0:
        return 0.0
    error = data - dequantize(quantize(data, spec), spec)
    return float(np.mean(error * error))
