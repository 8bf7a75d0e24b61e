"""Differentiable operators.

Each op computes its forward value with numpy (or a kernel from
:mod:`kernels`) and registers a closure that maps the output gradient to
input gradients.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, make_result

BCE_EPS = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"precision mismatch: {a.precision} vs {b.precision}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# ------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


elementwise_mul = mul


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result("log", np.log(xd), (x,), lambda g: (g / xd,))


# ------------------------------------------------------------ reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.data.dtype, copy=True),)

    return make_result("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result("getitem", np.array(x.data[idx]), (x,), back)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)

    def back(g):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]

    return make_result("stack", np.stack([t.data for t in xs], axis=axis), xs, back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_result("concat", np.concatenate([t.data for t in xs], axis=axis), xs,
                       lambda g: np.split(g, splits, axis=axis))


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result("matmul", ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[N, Din] -> x @ weight.T + bias with weight[Dout, Din]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("linear", out, inputs, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", y, (x,), back)


# ------------------------------------------------------------ convolution family

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride/pad {stride}/{pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {cout} output channels")
    if x.data.dtype != kernel.data.dtype:
        raise TypeError("conv2d: precision mismatch")
    xd, kd = np.ascontiguousarray(x.data), np.ascontiguousarray(kernel.data)
    out = kernels.conv2d_forward(xd, kd, stride, pad)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        gx, gk = kernels.conv2d_backward(g, xd, kd, stride, pad)
        grads = [gx if x.requires_grad else None, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv2d", out, inputs, back)


def max_pool2d(x: Tensor, kernel_size: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-d input, got {x.shape}")
    xd = np.ascontiguousarray(x.data)
    out, idx = kernels.maxpool_forward(xd, kernel_size, stride, pad)
    return make_result("max_pool2d", out, (x,),
                       lambda g: (kernels.maxpool_backward(g, xd, idx, kernel_size, stride, pad),))


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype),)

    return make_result("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), back)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization. In training mode the running buffers are
    updated in place (unbiased variance, like most frameworks)."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n, c, h, w = x.shape
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm2d: need at least 2 values per channel in train mode")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var.reshape(c) * m / (m - 1)).astype(running_var.dtype)

        def back(g):
            gxhat = g * gd
            gx = inv / m * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv

        def back(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    return make_result("batch_norm2d", out, (x, gamma, beta), back)


# ------------------------------------------------------------ losses

def bce(y, yhat: Tensor) -> Tensor:
    """Elementwise binary cross-entropy with yhat clamped to [eps, 1-eps].

    ``y`` is a constant label array. Gradient is zero where the clamp is
    active.
    """
    yd = np.asarray(y, dtype=yhat.data.dtype)
    if yd.shape != yhat.shape:
        raise ShapeError(f"bce: labels {yd.shape} vs predictions {yhat.shape}")
    p = yhat.data
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    out = -(yd * np.log(pc) + (1 - yd) * np.log1p(-pc))
    inside = (p >= BCE_EPS) & (p <= 1 - BCE_EPS)

    def back(g):
        return (g * inside * (pc - yd) / (pc * (1 - pc)),)

    return make_result("bce", out, (yhat,), back)
