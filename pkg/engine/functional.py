"""
Differentiable operations of the engine.

Broadcasting is deliberately narrow: operands either share a shape, one of them is a
0-d scalar, or one of them is a per-channel vector of length C broadcast over axis 1
of an [N, C, ...] tensor.
"""
import logging
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from engine.tensor import Function, NumericalError, ShapeError, Tensor, get_dtype

logger = logging.getLogger("lic-quant.engine.functional")

DIV_EPS = 1e-12


def _align(op: str, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return a, b
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return a.reshape(_channel_shape(a.shape[0], b.ndim)), b
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return a, b.reshape(_channel_shape(b.shape[0], a.ndim))
    raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} are neither equal nor per-channel")


def _channel_shape(channels: int, ndim: int) -> tuple[int, ...]:
    return (1, channels) + (1,) * (ndim - 2)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to the operand's original shape."""
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(dtype=np.float64), dtype=grad.dtype)
    axes = tuple(axis for axis in range(grad.ndim) if axis != 1)
    return grad.sum(axis=axes, dtype=np.float64).astype(grad.dtype).reshape(shape)


class _Binary(Function):
    op = "binary"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        self.a, self.b = _align(self.op, a, b)
        return self.compute(self.a, self.b)

    def compute(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def partials(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        ga, gb = self.partials(grad)
        full = grad.shape
        ga = np.broadcast_to(ga, full) if ga.shape != full else ga
        gb = np.broadcast_to(gb, full) if gb.shape != full else gb
        return _reduce_to(ga, self.shapes[0]), _reduce_to(gb, self.shapes[1])


class Add(_Binary):
    op = "add"

    def compute(self, a, b):
        return a + b

    def partials(self, grad):
        return grad, grad


class Sub(_Binary):
    op = "sub"

    def compute(self, a, b):
        return a - b

    def partials(self, grad):
        return grad, -grad


class Mul(_Binary):
    op = "mul"

    def compute(self, a, b):
        return a * b

    def partials(self, grad):
        return grad * self.b, grad * self.a


class Div(_Binary):
    op = "div"

    def compute(self, a, b):
        small = np.abs(b) < DIV_EPS
        if small.any():
            index = np.unravel_index(int(np.argmax(small)), small.shape) if small.ndim else ()
            raise NumericalError(f"div: |denominator| < {DIV_EPS} at index {tuple(int(i) for i in index)}")
        return a / b

    def partials(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Abs(Function):
    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        # sign(0) == 0, so the subgradient at zero is 0
        return (grad * self.sign,)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Square(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (2 * grad * self.x,)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Clip(Function):
    def forward(self, x, lo: float = -np.inf, hi: float = np.inf):
        if not lo <= hi:
            raise ShapeError(f"clip: lower bound {lo} exceeds upper bound {hi}")
        self.mask = (x > lo) & (x < hi)
        return np.clip(x, lo, hi).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(0, x).astype(x.dtype)

    def backward(self, grad):
        return (grad * expit(self.x).astype(grad.dtype),)


class Reduce(Function):
    def forward(self, x, kind: str = "sum", axes: tuple[int, ...] | None = None):
        self.in_shape = x.shape
        self.axes = axes
        total = np.sum(x, axis=axes, dtype=np.float64)
        self.count = 1
        if kind == "mean":
            self.count = int(np.prod([x.shape[a] for a in axes])) if axes is not None else x.size
            total = total / max(self.count, 1)
        return np.asarray(total, dtype=x.dtype)

    def backward(self, grad):
        expanded = grad if self.axes is None else np.expand_dims(grad, self.axes)
        return (np.broadcast_to(expanded / self.count, self.in_shape).astype(grad.dtype),)


class Reshape(Function):
    def forward(self, x, shape: tuple[int, ...] = ()):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from e

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class ChannelMix(Function):
    """out[n, i] = Σ_j m[i, j] · x[n, j], applied at every spatial location."""

    def forward(self, x, m):
        if x.ndim < 2 or m.shape != (x.shape[1], x.shape[1]):
            raise ShapeError(f"channel_mix: matrix {m.shape} does not match input channels of {x.shape}")
        self.x, self.m = x, m
        return np.einsum("ij,nj...->ni...", m, x)

    def backward(self, grad):
        gx = np.einsum("ij,ni...->nj...", self.m, grad)
        gm = np.einsum("nik,njk->ij", grad.reshape(grad.shape[0], grad.shape[1], -1),
                       self.x.reshape(self.x.shape[0], self.x.shape[1], -1))
        return gx, gm


# Raw convolution kernels, shared by the float graph and the integer simulator.

def conv2d_raw(x: np.ndarray, kernel: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """
    Cross-correlation of x [N, C_in, H, W] with kernel [C_out, C_in, kH, kW].

    Works on float and integer arrays alike; integer inputs accumulate exactly.
    """
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kh, kw = kernel.shape[2:]
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_transpose_raw(
        x: np.ndarray,
        kernel: np.ndarray,
        stride: int,
        pad: int,
        out_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """
    Adjoint of conv2d_raw: x [N, A, H, W] with kernel [A, B, kH, kW] -> [N, B, H', W'].

    By default H' = (H − 1)·stride − 2·pad + kH. When used as the input gradient of a
    convolution, ``out_hw`` restores the original (possibly larger) spatial size.
    """
    n, _, h, w = x.shape
    kh, kw = kernel.shape[2:]
    if out_hw is None:
        out_hw = ((h - 1) * stride - 2 * pad + kh, (w - 1) * stride - 2 * pad + kw)
    full_h = max(out_hw[0] + 2 * pad, (h - 1) * stride + kh)
    full_w = max(out_hw[1] + 2 * pad, (w - 1) * stride + kw)
    buf = np.zeros((n, kernel.shape[1], full_h, full_w), dtype=np.result_type(x, kernel))
    for i in range(kh):
        for j in range(kw):
            stamp = np.tensordot(x, kernel[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            buf[:, :, i:i + (h - 1) * stride + 1:stride, j:j + (w - 1) * stride + 1:stride] += stamp
    return np.ascontiguousarray(buf[:, :, pad:pad + out_hw[0], pad:pad + out_hw[1]])


def _check_conv(op: str, x: np.ndarray, kernel: np.ndarray, in_axis: int, stride: int, pad: int) -> None:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"{op}: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[in_axis]:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels but kernel {kernel.shape} expects "
                         f"{kernel.shape[in_axis]}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"{op}: stride must be >= 1 and pad >= 0, got stride={stride}, pad={pad}")


class Conv2d(Function):
    def forward(self, x, kernel, bias=None, stride: int = 1, pad: int = 0):
        _check_conv("conv2d", x, kernel, 1, stride, pad)
        kh, kw = kernel.shape[2:]
        if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {x.shape[2:]} (pad={pad})")
        if bias is not None and bias.shape != (kernel.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
        self.x, self.kernel, self.stride, self.pad = x, kernel, stride, pad
        out = conv2d_raw(x, kernel, stride, pad)
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1)
        return out.astype(x.dtype)

    def backward(self, grad):
        gx = conv2d_transpose_raw(grad, self.kernel, self.stride, self.pad, out_hw=self.x.shape[2:])
        padded = np.pad(self.x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        kh, kw = self.kernel.shape[2:]
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        gk = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx.astype(grad.dtype), gk.astype(grad.dtype)]
        if len(self.inputs) == 3:
            grads.append(grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype))
        return grads


class Conv2dTranspose(Function):
    def forward(self, x, kernel, bias=None, stride: int = 1, pad: int = 0):
        _check_conv("conv2d_transpose", x, kernel, 0, stride, pad)
        out_h = (x.shape[2] - 1) * stride - 2 * pad + kernel.shape[2]
        out_w = (x.shape[3] - 1) * stride - 2 * pad + kernel.shape[3]
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv2d_transpose: output size {out_h}x{out_w} is empty")
        if bias is not None and bias.shape != (kernel.shape[1],):
            raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} does not match "
                             f"{kernel.shape[1]} output channels")
        self.x, self.kernel, self.stride, self.pad = x, kernel, stride, pad
        out = conv2d_transpose_raw(x, kernel, stride, pad)
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1)
        return out.astype(x.dtype)

    def backward(self, grad):
        gx = conv2d_raw(grad, self.kernel, self.stride, self.pad)
        padded = np.pad(grad, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        kh, kw = self.kernel.shape[2:]
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        gk = np.tensordot(self.x, windows, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx.astype(grad.dtype), gk.astype(grad.dtype)]
        if len(self.inputs) == 3:
            grads.append(grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype))
        return grads


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor | float, b: Tensor | float) -> Tensor:
    """
    Elementwise division.

    :raises: NumericalError naming the offending index when |b| < 1e-12 anywhere.
    """
    return Div.apply(a, b)


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Abs.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """max(lo, min(x, hi)); the gradient is 1 strictly inside (lo, hi) and 0 elsewhere."""
    return Clip.apply(x, lo=float(lo), hi=float(hi))


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def reduce(x: Tensor, kind: str = "sum", axes: Sequence[int] | int | None = None) -> Tensor:
    """
    Sum or mean over the listed axes (all axes when None).

    Accumulation always happens in 64-bit in numpy's fixed pairwise order; the
    result is cast back to the computation precision.

    :param Tensor x: Input.
    :param str kind: "sum" or "mean".
    :param axes: Axes to reduce.
    :return: The reduced tensor.
    :rtype: Tensor

    :raises: ShapeError on invalid axes or an unknown kind.
    """
    if kind not in ("sum", "mean"):
        raise ShapeError(f"reduce: unknown kind {kind!r}")
    if axes is not None:
        axes = (axes,) if isinstance(axes, int) else tuple(axes)
        ndim = x.ndim
        if any(not -ndim <= a < ndim for a in axes):
            raise ShapeError(f"reduce: axes {axes} out of range for shape {x.shape}")
        axes = tuple(sorted(a % ndim for a in axes))
        if len(set(axes)) != len(axes):
            raise ShapeError(f"reduce: repeated axes {axes}")
    return Reduce.apply(x, kind=kind, axes=axes)


def sum(x: Tensor, axes: Sequence[int] | int | None = None) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axes)


def mean(x: Tensor, axes: Sequence[int] | int | None = None) -> Tensor:
    return reduce(x, "mean", axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def channel_mix(x: Tensor, matrix: Tensor) -> Tensor:
    return ChannelMix.apply(x, matrix)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    2-d cross-correlation.

    :param Tensor x: Input [N, C_in, H, W].
    :param Tensor kernel: Kernel [C_out, C_in, kH, kW].
    :param bias: Optional bias [C_out].
    :param int stride: Stride, >= 1.
    :param int pad: Zero padding on every spatial side.
    :return: Output [N, C_out, H', W'] with H' = floor((H + 2·pad − kH) / stride) + 1.
    :rtype: Tensor

    :raises: ShapeError describing the mismatch.
    """
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Conv2d.apply(*inputs, stride=stride, pad=pad)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Transposed convolution, the adjoint of conv2d for the same kernel.

    :param Tensor x: Input [N, C_in, H, W].
    :param Tensor kernel: Kernel [C_in, C_out, kH, kW].
    :param bias: Optional bias [C_out].
    :param int stride: Stride, >= 1.
    :param int pad: Cropping on every spatial side.
    :return: Output [N, C_out, (H − 1)·stride − 2·pad + kH, ...].
    :rtype: Tensor
    """
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Conv2dTranspose.apply(*inputs, stride=stride, pad=pad)


def constant_like(x: Tensor, value: np.ndarray) -> Tensor:
    """A non-trainable tensor in the current precision, shaped like ``x``."""
    return Tensor(np.broadcast_to(np.asarray(value, dtype=get_dtype()), x.shape).copy())
