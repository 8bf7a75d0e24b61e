"""Numeric kernels for convolution and max pooling.

Two interchangeable backends: torch's CPU kernels (fast, used when torch is
importable) and a numpy im2col reference. Both take and return numpy arrays.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import torch
    import torch.nn.functional as F
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None

BACKEND = "torch" if torch is not None else "numpy"


def set_backend(name: str) -> None:
    global BACKEND
    if name not in ("torch", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "torch" and torch is None:
        raise RuntimeError("torch backend requested but torch is not installed")
    BACKEND = name


def set_num_threads(n: int) -> None:
    """Intra-op thread count of the torch backend (no-op for numpy)."""
    if torch is not None and n > 0:
        torch.set_num_threads(n)


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- numpy path

def _im2col(x, kh, kw, stride, pad):
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv_fwd_np(x, w, stride, pad):
    n = x.shape[0]
    cout, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(cout, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def _conv_bwd_np(gout, x, w, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    g2 = gout.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    gw = (g2.T @ cols).reshape(w.shape)
    gcols = (g2 @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    gxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw


def _pool_fwd_np(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    # flat index into the unpadded input plane
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * stride + di - pad
    cols = np.arange(wo)[None, :] * stride + dj - pad
    return np.ascontiguousarray(out), rows * w + cols


def _pool_bwd_np(gout, x_shape, idx):
    n, c, h, w = x_shape
    gx = np.zeros((n * c, h * w), dtype=gout.dtype)
    flat_idx = idx.reshape(n * c, -1)
    g = gout.reshape(n * c, -1)
    for r in range(n * c):
        np.add.at(gx[r], flat_idx[r], g[r])
    return gx.reshape(x_shape)


# ---------------------------------------------------------------- dispatch

def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    if BACKEND == "torch":
        with torch.no_grad():
            return F.conv2d(torch.from_numpy(x), torch.from_numpy(w), stride=stride, padding=pad).numpy()
    return _conv_fwd_np(x, w, stride, pad)


def conv2d_backward(gout, x, w, stride, pad):
    """Return (grad_input, grad_weight)."""
    if BACKEND == "torch":
        with torch.no_grad():
            gi, gw, _ = torch.ops.aten.convolution_backward(
                torch.from_numpy(np.ascontiguousarray(gout)), torch.from_numpy(x), torch.from_numpy(w),
                None, [stride, stride], [pad, pad], [1, 1], False, [0, 0], 1, [True, True, False])
        return gi.numpy(), gw.numpy()
    return _conv_bwd_np(gout, x, w, stride, pad)


def maxpool_forward(x: np.ndarray, k: int, stride: int, pad: int):
    """Return (output, argmax indices into each flattened input plane)."""
    if BACKEND == "torch":
        with torch.no_grad():
            out, idx = F.max_pool2d(torch.from_numpy(x), k, stride, pad, return_indices=True)
        return out.numpy(), idx.numpy()
    return _pool_fwd_np(x, k, stride, pad)


def maxpool_backward(gout, x, idx, k, stride, pad):
    if BACKEND == "torch":
        with torch.no_grad():
            gx = torch.ops.aten.max_pool2d_with_indices_backward(
                torch.from_numpy(np.ascontiguousarray(gout)), torch.from_numpy(x), [k, k],
                [stride, stride], [pad, pad], [1, 1], False, torch.from_numpy(idx))
        return gx.numpy()
    return _pool_bwd_np(gout, x.shape, idx)
