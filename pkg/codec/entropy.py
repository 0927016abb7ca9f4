"""
Factorized zero-mean Gaussian entropy proxy and latent quantization.

The likelihood of a rounded latent ŷ under channel scale σ is the Gaussian mass of the
unit interval around it, floored at ``P_MIN``. The normal CDF comes from
``scipy.special.ndtr``.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from engine import functional as F
from engine.prng import Xoshiro256
from engine.tensor import Function, ShapeError, Tensor, parameter

logger = logging.getLogger("lic-quant.codec.entropy")

P_MIN = 1e-9
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pdf(u: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * u * u)


class GaussianLikelihood(Function):
    """p = Φ((0.5 − |ŷ|)/σ) − Φ((−0.5 − |ŷ|)/σ) per element, with σ = exp(log_scale) per channel."""

    def forward(self, y, log_scale, p_min: float = P_MIN):
        if y.ndim != 4 or log_scale.shape != (y.shape[1],):
            raise ShapeError(f"likelihood: {log_scale.shape[0]} scales cannot cover latent of shape {y.shape}")
        wide = y.astype(np.float64)
        sigma = np.exp(log_scale.astype(np.float64)).reshape(1, -1, 1, 1)
        # Evaluated on −|ŷ| so both CDF arguments stay in the accurate lower tail
        v = np.abs(wide)
        upper = (0.5 - v) / sigma
        lower = (-0.5 - v) / sigma
        p = ndtr(upper) - ndtr(lower)
        self.floored = p < p_min
        self.sign = np.sign(wide)
        self.upper, self.lower, self.sigma = upper, lower, sigma
        return np.clip(p, p_min, 1.0).astype(y.dtype)

    def backward(self, grad):
        g = grad.astype(np.float64) * ~self.floored
        pdf_upper, pdf_lower = _pdf(self.upper), _pdf(self.lower)
        dp_dv = (pdf_lower - pdf_upper) / self.sigma
        gy = g * self.sign * dp_dv
        # dp/dlog σ = σ · dp/dσ
        dp_dlog = -(pdf_upper * self.upper - pdf_lower * self.lower)
        gs = (g * dp_dlog).sum(axis=(0, 2, 3))
        return gy.astype(grad.dtype), gs.astype(grad.dtype)


@dataclass
class EntropyProxy:
    log_scale: Tensor
    p_min: float = P_MIN

    @classmethod
    def initial(cls, channels: int) -> "EntropyProxy":
        return cls(log_scale=parameter(np.zeros(channels), name="log_scale"))

    @property
    def channels(self) -> int:
        return self.log_scale.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_scale.data.astype(np.float64))

    def parameters(self) -> dict[str, Tensor]:
        return {"log_scale": self.log_scale}


def likelihood(y_hat: Tensor, proxy: EntropyProxy) -> Tensor:
    return GaussianLikelihood.apply(y_hat, proxy.log_scale, p_min=proxy.p_min)


def rate_estimate(y_hat: Tensor, proxy: EntropyProxy) -> Tensor:
    """
    Estimated rate of the quantized latent in bits.

    :param Tensor y_hat: Quantized (or noisy) latent [N, M, h, w].
    :param EntropyProxy proxy: Per-channel scales.
    :return: Scalar R = Σ −log₂ p.
    :rtype: Tensor

    :raises: ShapeError when the proxy and latent channel counts differ.
    """
    return F.sum(-F.log(likelihood(y_hat, proxy))) * (1.0 / math.log(2.0))


class RoundHalfEven(Function):
    """Round to the nearest integer, ties to even; the gradient passes straight through."""

    def forward(self, x):
        return np.rint(x)

    def backward(self, grad):
        return (grad,)


def latent_quantize_eval(y: Tensor) -> Tensor:
    return RoundHalfEven.apply(y)


def latent_quantize_train(y: Tensor, rng: Xoshiro256) -> Tensor:
    """Training proxy for rounding: ŷ = y + u, u ~ U(−0.5, 0.5) i.i.d."""
    noise = rng.uniform(y.shape, -0.5, 0.5)
    return y + F.constant_like(y, noise)
