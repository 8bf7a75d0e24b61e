"""Central finite-difference gradient verification (run in check precision)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-6,
                 index: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (perturbed in place).

    With ``index`` given only those coordinates are probed; the rest of the
    returned array stays zero.
    """
    out = np.zeros_like(arr, dtype=np.float64)
    coords = index if index is not None else list(np.ndindex(arr.shape))
    for ix in coords:
        old = arr[ix]
        arr[ix] = old + eps
        fp = f()
        arr[ix] = old - eps
        fm = f()
        arr[ix] = old
        out[ix] = (fp - fm) / (2 * eps)
    return out


def analytic_grads(build: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    with Tape() as tape:
        loss = build()
    g = tape.backward(loss, wrt=wrt)
    return [g[t] for t in wrt]


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def check_function(name: str, build: Callable[[], Tensor], wrt: Sequence[Tensor],
                   threshold: float, eps: float = 1e-6) -> CheckResult:
    """Compare backward() with full-coordinate central differences."""
    for t in wrt:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require check precision (float64)")
    analytic = analytic_grads(build, wrt)

    def f():
        return float(build().data.sum())

    errs = [rel_error(a, numeric_grad(f, t.data, eps)) for a, t in zip(analytic, wrt)]
    return CheckResult(name, max(errs), threshold)


def check_directional(name: str, build: Callable[[], Tensor], wrt: Sequence[Tensor],
                      threshold: float, rng: np.random.Generator, n_dirs: int = 3,
                      coords_per_tensor: int = 2, eps: float = 1e-6) -> CheckResult:
    """Cheaper check for large graphs: random directional derivatives over
    all of ``wrt`` jointly, plus a few random single coordinates per tensor."""
    analytic = analytic_grads(build, wrt)

    def f():
        return float(build().data.sum())

    errs = []
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(t.shape) for t in wrt]
        norm = np.sqrt(np.sum([np.sum(d * d) for d in dirs]))
        dirs = [d / norm for d in dirs]
        base = [t.data.copy() for t in wrt]
        for t, b, d in zip(wrt, base, dirs):
            t.data[...] = b + eps * d
        fp = f()
        for t, b, d in zip(wrt, base, dirs):
            t.data[...] = b - eps * d
        fm = f()
        for t, b in zip(wrt, base):
            t.data[...] = b
        num = (fp - fm) / (2 * eps)
        ana = float(np.sum([np.sum(a * d) for a, d in zip(analytic, dirs)]))
        errs.append(rel_error(np.array([ana]), np.array([num])))
    for a, t in zip(analytic, wrt):
        flat = rng.choice(t.data.size, size=min(coords_per_tensor, t.data.size), replace=False)
        idx = [np.unravel_index(i, t.shape) for i in flat]
        num = numeric_grad(f, t.data, eps, idx)
        sel = np.array([a[i] for i in idx])
        ns = np.array([num[i] for i in idx])
        # tiny coordinates carry no signal; judge them against the tensor's gradient scale
        scale = max(np.abs(a).max(), 1e-12)
        errs.append(float(np.max(np.abs(sel - ns)) / max(np.max(np.abs(sel)), np.max(np.abs(ns)), 1e-3 * scale)))
    return CheckResult(name, max(errs), threshold)
