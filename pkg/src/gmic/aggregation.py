"""Global prediction path and the composite training objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, make_result

# entries below this contribute no regularizer gradient (beta < 1 blows up at 0)
REG_GRAD_FLOOR = 1e-6


@dataclass
class PoolingConfig:
    t: float = 2.0  # percent of cells kept

    def __post_init__(self):
        if not (0 < self.t <= 100):
            raise ValueError(f"pooling percentage t must be in (0, 100], got {self.t}")

    def cells(self, h: int, w: int) -> int:
        return min(h * w, max(1, math.ceil(self.t / 100.0 * h * w - 1e-9)))


@dataclass
class LossConfig:
    lam: float = 1e-3
    beta: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.beta <= 0:
            raise ValueError(f"need lambda >= 0 and beta > 0, got {self.lam}, {self.beta}")


def topk_indices(flat: np.ndarray, m: int) -> np.ndarray:
    """Indices of the m largest entries along the last axis; ties keep
    row-major order (stable sort)."""
    return np.argsort(-flat, axis=-1, kind="stable")[..., :m]


def f_agg(A: Tensor, cfg: PoolingConfig | None = None, m: int | None = None) -> Tensor:
    """Mean of the top-m cells of each [.., h, w] map -> [..]."""
    if A.ndim < 2:
        raise ValueError(f"f_agg needs a [..., h, w] map, got {A.shape}")
    h, w = A.shape[-2:]
    if m is None:
        m = (cfg or PoolingConfig()).cells(h, w)
    lead = A.shape[:-2]
    flat = A.data.reshape(-1, h * w)
    idx = topk_indices(flat, m)
    vals = np.take_along_axis(flat, idx, axis=1).mean(axis=1).reshape(lead)

    def back(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx, np.repeat(g.reshape(-1, 1) / m, m, axis=1), axis=1)
        return (gflat.reshape(A.shape),)

    return make_result("f_agg", np.asarray(vals, dtype=A.data.dtype), (A,), back)


def l_reg(A: Tensor, beta: float) -> Tensor:
    """sum over the last two axes of |A|^beta -> [..]."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    a = A.data
    absa = np.abs(a)
    out = (absa ** beta).sum(axis=(-2, -1))

    def back(g):
        safe = np.where(absa > REG_GRAD_FLOOR, absa, 1.0)
        d = np.where(absa > REG_GRAD_FLOOR, beta * safe ** (beta - 1) * np.sign(a), 0.0)
        return ((g[..., None, None] * d).astype(a.dtype),)

    return make_result("l_reg", np.asarray(out, dtype=a.dtype), (A,), back)


def image_losses(y, y_loc: Tensor, y_mil: Tensor, A: Tensor, cfg: LossConfig) -> Tensor:
    """Per-image composite loss [N]; y, y_loc, y_mil are [N, C], A is [N, C, h, w]."""
    y = np.asarray(y)
    per_class = dc.add(dc.add(dc.bce(y, y_loc), dc.bce(y, y_mil)), dc.mul(l_reg(A, cfg.beta), cfg.lam))
    return dc.sum(per_class, axis=1)


def total_loss(y, y_loc: Tensor, y_mil: Tensor, A: Tensor, cfg: LossConfig) -> Tensor:
    """Composite objective averaged over the images of a batch. Unbatched
    inputs ([C] and [C, h, w]) are treated as a batch of one."""
    y = np.asarray(y)
    if y_loc.ndim == 1:
        C = y_loc.shape[0]
        y = y.reshape(1, C)
        y_loc = dc.reshape(y_loc, (1, C))
        y_mil = dc.reshape(y_mil, (1, C))
        A = dc.reshape(A, (1,) + A.shape)
    return dc.mean(image_losses(y, y_loc, y_mil, A, cfg))


def fuse(y_loc, y_mil):
    """Inference prediction: elementwise mean of the two paths."""
    if isinstance(y_loc, Tensor) or isinstance(y_mil, Tensor):
        return dc.mul(dc.add(y_loc, y_mil), 0.5)
    return 0.5 * (np.asarray(y_loc) + np.asarray(y_mil))
