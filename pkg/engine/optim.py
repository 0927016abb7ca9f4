import logging
from dataclasses import dataclass, field

import numpy as np

from engine.tensor import NumericalError, Tensor

logger = logging.getLogger("lic-quant.engine.optim")

# Adam defaults from the reference training setup
BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers per parameter name, plus the shared step count."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
        params: dict[str, Tensor],
        state: AdamState,
        lr: float,
        beta1: float = BETA1,
        beta2: float = BETA2,
        eps: float = EPS,
) -> AdamState:
    """
    Apply one bias-corrected Adam update in place and clear the gradients.

    Parameters without a gradient are treated as having a zero gradient.
    Parameters are visited in the dict's insertion order.

    :param dict[str, Tensor] params: Named trainable leaves.
    :param AdamState state: Moment buffers; missing entries are created as zeros.
    :param float lr: Learning rate.
    :param float beta1: First-moment decay.
    :param float beta2: Second-moment decay.
    :param float eps: Denominator stabilizer.
    :return: The updated state (same object).
    :rtype: AdamState

    :raises: NumericalError naming the parameter when a gradient is not finite.
    """
    for name, param in params.items():
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    for name, param in params.items():
        grad = np.zeros_like(param.data) if param.grad is None else param.grad.astype(param.data.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != param.shape:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype)
        state.m[name], state.v[name] = m.astype(param.data.dtype), v.astype(param.data.dtype)
        param.grad = None
    return state
