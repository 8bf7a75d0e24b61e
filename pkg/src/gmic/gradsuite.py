"""Finite-difference gradient suite over every registered op and the composite loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .aggregation import f_agg, l_reg
from .diffcore import CHECK, Tensor
from .diffcore.gradcheck import check_directional, check_function
from .milmodule import GatedAttention, MilConfig

OP_THRESHOLD = 1e-5
COMPOSITE_THRESHOLD = 1e-4

Case = tuple[Callable[[], Tensor], list[Tensor]]


def _t(rng, *shape, lo=None):
    a = rng.standard_normal(shape)
    if lo is not None:
        a = np.abs(a) + lo
    return Tensor(a, requires_grad=True)


def _unary(fn, lo=None):
    def case(rng):
        x = _t(rng, 3, 4, lo=lo)
        w = rng.standard_normal((3, 4))
        return (lambda: dc.sum(dc.mul(fn(x), Tensor(w)))), [x]
    return case


def _binary(fn):
    def case(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4)
        w = rng.standard_normal((3, 4))
        return (lambda: dc.sum(dc.mul(fn(a, b), Tensor(w)))), [a, b]
    return case


def _proj(build_out, wrt, rng) -> Case:
    # random projection of the output so every coordinate matters
    w = {}

    def build():
        out = build_out()
        if "w" not in w:
            w["w"] = rng.standard_normal(out.shape)
        return dc.sum(dc.mul(out, Tensor(w["w"])))
    return build, wrt


def _conv(rng):
    x, k, b = _t(rng, 2, 2, 7, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    return _proj(lambda: dc.conv2d(x, k, b, stride=2, pad=1), [x, k, b], rng)


def _pool(rng):
    x = _t(rng, 2, 2, 7, 6)
    return _proj(lambda: dc.max_pool2d(x, 3, 2, 1), [x], rng)


def _gap(rng):
    x = _t(rng, 2, 3, 4, 5)
    return _proj(lambda: dc.global_avg_pool(x), [x], rng)


def _bn(rng):
    x, g, b = _t(rng, 3, 2, 3, 3), _t(rng, 2), _t(rng, 2)
    rm, rv = np.zeros(2), np.ones(2)
    return _proj(lambda: dc.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training=True), [x, g, b], rng)


def _linear(rng):
    x, W, b = _t(rng, 3, 4), _t(rng, 5, 4), _t(rng, 5)
    return _proj(lambda: dc.linear(x, W, b), [x, W, b], rng)


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    return _proj(lambda: dc.matmul(a, b), [a, b], rng)


def _bce(rng):
    p = Tensor(rng.uniform(0.05, 0.95, (3, 2)), requires_grad=True)
    y = rng.integers(0, 2, (3, 2))
    return (lambda: dc.sum(dc.bce(y, p))), [p]


def _f_agg(rng):
    A = _t(rng, 2, 2, 5, 5)
    return _proj(lambda: f_agg(A, m=3), [A], rng)


def _l_reg(rng):
    A = Tensor(rng.uniform(0.05, 1.0, (2, 2, 4, 4)), requires_grad=True)
    beta = float(np.exp(rng.uniform(-1.6, 1.6)))
    return _proj(lambda: l_reg(A, beta), [A], rng)


def _attention(rng):
    cfg = MilConfig(L=5, attention_dim=4)
    att = GatedAttention(cfg)
    store = dc.ParamStore()
    att.init(store, rng)
    store = store.astype(CHECK)
    h = _t(rng, 2, 3, 5)
    return _proj(lambda: att(store, h)[1], [h] + store.tensors(), rng)


OP_CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary(dc.add),
    "sub": _binary(dc.sub),
    "mul": _binary(dc.mul),
    "sigmoid": _unary(dc.sigmoid),
    "tanh": _unary(dc.tanh),
    "relu": _unary(dc.relu),
    "log": _unary(dc.log, lo=0.2),
    "sum": _unary(lambda x: dc.mul(dc.sum(x, axis=1, keepdims=True), x)),
    "mean": _unary(lambda x: dc.mul(dc.mean(x, axis=0, keepdims=True), x)),
    "reshape": _unary(lambda x: dc.reshape(dc.reshape(x, (2, 6)), (3, 4))),
    "transpose": _unary(lambda x: dc.transpose(dc.transpose(x, (1, 0)), (1, 0))),
    "getitem": _unary(lambda x: dc.concat([dc.getitem(x, (slice(0, 2),)), dc.getitem(x, (slice(1, 2),))], 0)),
    "stack": _unary(lambda x: dc.sum(dc.stack([x, dc.mul(x, x)], axis=0), axis=0)),
    "concat": _unary(lambda x: dc.getitem(dc.concat([x, x], axis=1), (slice(None), slice(2, 6)))),
    "softmax": _unary(lambda x: dc.softmax(x, axis=1)),
    "matmul": _matmul,
    "linear": _linear,
    "conv2d": _conv,
    "max_pool2d": _pool,
    "global_avg_pool": _gap,
    "batch_norm2d": _bn,
    "bce": _bce,
    "f_agg": _f_agg,
    "l_reg": _l_reg,
    "gated_attention": _attention,
}


@dataclass
class SuiteRow:
    name: str
    seeds: int
    max_error: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold


def check_op(name: str, seeds=range(20), threshold: float = OP_THRESHOLD) -> SuiteRow:
    t0 = time.time()
    worst = 0.0
    for s in seeds:
        build, wrt = OP_CASES[name](np.random.default_rng([s, 11]))
        worst = max(worst, check_function(name, build, wrt, threshold).error)
    return SuiteRow(name, len(seeds), worst, threshold, time.time() - t0)


def composite_case(cfg, seed: int):
    """Full composite objective on a toy configuration, in check precision."""
    from .training import build_model, compute_loss
    rng = np.random.default_rng([seed, 23])
    model = build_model(cfg)
    store = model.init_params(seed).astype(CHECK)
    # nudge the saliency bias so the sigmoid is not flat at init
    store["saliency.bias"].data[...] = rng.uniform(-0.5, 0.5, store["saliency.bias"].shape)
    n = 2
    images = rng.standard_normal((n, 1, cfg.data.height, cfg.data.width))
    labels = rng.integers(0, 2, (n, cfg.model.num_classes)).astype(np.float64)
    return (lambda: compute_loss(model, store, images, labels, cfg)), store.tensors()


def check_composite(cfg=None, seeds=range(20), threshold: float = COMPOSITE_THRESHOLD) -> SuiteRow:
    from .config import toy_config
    cfg = cfg or toy_config()
    t0 = time.time()
    worst = 0.0
    for s in seeds:
        build, wrt = composite_case(cfg, s)
        res = check_directional("composite", build, wrt, threshold, np.random.default_rng([s, 29]),
                                n_dirs=3, coords_per_tensor=1)
        worst = max(worst, res.error)
    return SuiteRow("composite", len(seeds), worst, threshold, time.time() - t0)


def run_suite(cfg=None, seeds: int = 20) -> list[SuiteRow]:
    rows = [check_op(name, range(seeds)) for name in OP_CASES]
    rows.append(check_composite(cfg, range(seeds)))
    return rows


def format_table(rows: list[SuiteRow]) -> str:
    lines = [f"{'check':<18}{'seeds':>6}{'max rel err':>14}{'threshold':>11}  result"]
    for r in rows:
        lines.append(f"{r.name:<18}{r.seeds:>6}{r.max_error:>14.3e}{r.threshold:>11.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

