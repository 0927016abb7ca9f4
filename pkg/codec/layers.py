"""
Layer zoo of the codec: ClippedReLU, simplified GDN / IGDN, slimmable GDN and their
quantized forms.

GDN here is the exponent-one form z_i = x_i / (β_i + Σ_j γ_ij |x_j|). β and γ are
stored as raw values behind a softplus so the denominator stays positive.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from engine import functional as F
from engine.tensor import ShapeError, Tensor, parameter
from quant.quantizer import QuantSpec, UNSIGNED, fake_quant, make_spec, weight_spec

logger = logging.getLogger("lic-quant.codec.layers")

BETA_FLOOR = 1e-6
GAMMA_INIT = 0.01
# Off-diagonal γ starts just above zero so softplus still passes a gradient
GAMMA_OFF_DIAGONAL_INIT = 1e-6


class ClipNotCalibratedError(Exception):
    """Raised when a quantized GDN layer runs before its clip bounds were calibrated."""
    pass


def softplus_inverse(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass
class GdnParams:
    raw_beta: Tensor
    raw_gamma: Tensor

    @classmethod
    def from_values(cls, beta: np.ndarray, gamma: np.ndarray) -> "GdnParams":
        """
        Build parameters whose reparameterized values equal the given β and γ.

        :param np.ndarray beta: Per-channel β, each >= BETA_FLOOR.
        :param np.ndarray gamma: C×C nonnegative γ.
        :return: Parameters.
        :rtype: GdnParams
        """
        beta = np.asarray(beta, dtype=np.float64)
        gamma = np.asarray(gamma, dtype=np.float64)
        if gamma.shape != (beta.shape[0], beta.shape[0]):
            raise ShapeError(f"gamma shape {gamma.shape} does not match {beta.shape[0]} channels")
        if np.any(beta < BETA_FLOOR) or np.any(gamma < 0):
            raise ValueError("GDN needs beta >= 1e-6 and gamma >= 0")
        return cls(
            raw_beta=parameter(softplus_inverse(beta - BETA_FLOOR), name="raw_beta"),
            raw_gamma=parameter(softplus_inverse(gamma), name="raw_gamma"),
        )

    @classmethod
    def initial(cls, channels: int) -> "GdnParams":
        """β = 1, γ = 0.01·I (off-diagonal entries at 1e-6)."""
        gamma = np.full((channels, channels), GAMMA_OFF_DIAGONAL_INIT)
        np.fill_diagonal(gamma, GAMMA_INIT)
        return cls.from_values(np.ones(channels), gamma)

    @property
    def channels(self) -> int:
        return self.raw_beta.shape[0]

    def beta(self) -> Tensor:
        return F.softplus(self.raw_beta) + BETA_FLOOR

    def gamma(self) -> Tensor:
        return F.softplus(self.raw_gamma)

    def parameters(self) -> dict[str, Tensor]:
        return {"raw_beta": self.raw_beta, "raw_gamma": self.raw_gamma}


@dataclass
class SlimGdnParams(GdnParams):
    """GDN followed by a per-channel affine a_i·z_i + b_i (a starts at 1, b at 0)."""
    scale: Tensor
    bias: Tensor

    @classmethod
    def from_gdn(cls, gdn: GdnParams, scale: np.ndarray | None = None,
                 bias: np.ndarray | None = None) -> "SlimGdnParams":
        channels = gdn.channels
        return cls(
            raw_beta=gdn.raw_beta,
            raw_gamma=gdn.raw_gamma,
            scale=parameter(np.ones(channels) if scale is None else scale, name="scale"),
            bias=parameter(np.zeros(channels) if bias is None else bias, name="bias"),
        )

    @classmethod
    def initial(cls, channels: int) -> "SlimGdnParams":
        return cls.from_gdn(GdnParams.initial(channels))

    def parameters(self) -> dict[str, Tensor]:
        return {**super().parameters(), "scale": self.scale, "bias": self.bias}


@dataclass
class ClipParams:
    """Clip bounds [lo, hi]; one-sided clips (ClippedReLU) have lo = 0 and hi = θ."""
    lo: float
    hi: float
    one_sided: bool = False

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"clip bounds need lo < hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def from_theta(cls, theta: float) -> "ClipParams":
        if not theta > 0:
            raise ValueError(f"theta must be positive, got {theta}")
        return cls(0.0, float(theta), one_sided=True)

    @classmethod
    def unbounded(cls) -> "ClipParams":
        return cls(-math.inf, math.inf)

    @property
    def theta(self) -> float:
        return self.hi

    @property
    def is_bounded(self) -> bool:
        return math.isfinite(self.lo) or math.isfinite(self.hi)


def _check_channels(x: Tensor, p: GdnParams) -> None:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"GDN with {p.channels} channels cannot consume input of shape {x.shape}")


def clipped_relu(x: Tensor, theta: float) -> Tensor:
    """
    max(0, min(x, θ)). θ = +inf is plain ReLU.

    :param Tensor x: Input.
    :param float theta: Upper bound, > 0.
    :return: Clipped activation.
    :rtype: Tensor
    """
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    if math.isinf(theta):
        return F.relu(x)
    return F.clip(x, 0.0, theta)


def gdn_denominator(x: Tensor, p: GdnParams) -> Tensor:
    """d_i = β_i + Σ_j γ_ij |x_j| evaluated by direct channel mixing."""
    _check_channels(x, p)
    return p.beta() + F.channel_mix(F.abs(x), p.gamma())


def gdn_denominator_as_conv(x: Tensor, p: GdnParams) -> Tensor:
    """The same denominator as a 1×1 convolution of |x| with kernel γ and bias β."""
    _check_channels(x, p)
    kernel = F.reshape(p.gamma(), (p.channels, p.channels, 1, 1))
    return F.conv2d(F.abs(x), kernel, p.beta(), stride=1, pad=0)


def gdn_forward(x: Tensor, p: GdnParams) -> Tensor:
    return x / gdn_denominator(x, p)


def igdn_forward(x: Tensor, p: GdnParams) -> Tensor:
    """Multiplicative counterpart z_i = x_i · (β_i + Σ_j γ_ij |x_j|)."""
    return x * gdn_denominator(x, p)


def slim_gdn_forward(x: Tensor, p: SlimGdnParams) -> Tensor:
    return p.scale * gdn_forward(x, p) + p.bias


def gdn_param_specs(p: GdnParams, bit_width: int) -> tuple[QuantSpec, QuantSpec]:
    """Per-channel symmetric spec for γ (rows) and an unsigned per-tensor spec for β."""
    gamma = p.gamma().data
    beta = p.beta().data
    return (
        weight_spec(gamma, bit_width, axis=0),
        make_spec(0.0, float(np.max(beta)), bit_width, UNSIGNED),
    )


def quantized_gdn_forward(
        x: Tensor,
        p: GdnParams,
        spec_x: QuantSpec,
        spec_gamma: QuantSpec,
        spec_beta: QuantSpec,
        clip: ClipParams | None,
        inverse: bool = False,
) -> Tensor:
    """
    Quantized GDN (or IGDN with ``inverse``).

    Pipeline: clip(x, a, b) -> one fake-quant of x -> numerator x_q, denominator from
    |x_q| with fake-quantized γ and β through the 1×1 decomposition. The division
    stays in real arithmetic. Quantized β is kept at least one step above zero.

    :param Tensor x: Input [N, C, H, W].
    :param GdnParams p: Parameters.
    :param QuantSpec spec_x: Activation spec of x.
    :param QuantSpec spec_gamma: Per-channel spec of γ.
    :param QuantSpec spec_beta: Spec of β.
    :param clip: Calibrated two-sided clip bounds.
    :param bool inverse: Multiply instead of divide.
    :return: Output tensor.
    :rtype: Tensor

    :raises: ClipNotCalibratedError if ``clip`` is None.
    """
    if clip is None:
        raise ClipNotCalibratedError("GDN input clip bounds are not calibrated; run calibration first")
    _check_channels(x, p)
    x_q = fake_quant(F.clip(x, clip.lo, clip.hi), spec_x)
    gamma_q = F.reshape(fake_quant(p.gamma(), spec_gamma), (p.channels, p.channels, 1, 1))
    beta_q = F.clip(fake_quant(p.beta(), spec_beta), float(spec_beta.scale), math.inf)
    denominator = F.conv2d(F.abs(x_q), gamma_q, beta_q, stride=1, pad=0)
    return x_q * denominator if inverse else x_q / denominator


def quantized_slim_gdn_forward(
        x: Tensor,
        p: SlimGdnParams,
        spec_x: QuantSpec,
        spec_gamma: QuantSpec,
        spec_beta: QuantSpec,
        clip: ClipParams | None,
) -> Tensor:
    return p.scale * quantized_gdn_forward(x, p, spec_x, spec_gamma, spec_beta, clip) + p.bias
