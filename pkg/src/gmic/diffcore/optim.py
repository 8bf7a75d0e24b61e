"""Named parameter storage and the Adam update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, dtype_for


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParamStore:
    """Learnable tensors plus non-learnable buffers (e.g. running norm stats).

    Insertion order is the canonical order used by checkpoints.
    """
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    adam: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.array(value)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))

    def astype(self, precision: str) -> "ParamStore":
        """Deep copy with every array cast to ``precision``."""
        dt = dtype_for(precision)
        out = ParamStore()
        for n, t in self.params.items():
            out.add(n, t.data.astype(dt, copy=True))
        for n, b in self.buffers.items():
            out.add_buffer(n, b.astype(dt, copy=True))
        for n, s in self.adam.items():
            out.adam[n] = AdamState(s.step, s.m.astype(dt, copy=True), s.v.astype(dt, copy=True))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, t in self.params.items():
            out.add(n, t.data.copy())
        for n, b in self.buffers.items():
            out.add_buffer(n, b.copy())
        for n, s in self.adam.items():
            out.adam[n] = AdamState(s.step, s.m.copy(), s.v.copy())
        return out

    def grads_by_name(self, grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        return {n: grads[t] for n, t in self.params.items() if t in grads}


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update, applied in place; returns ``store``.

    Parameters without an entry in ``grads`` are left untouched.
    """
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        dt = p.data.dtype
        g = g.astype(dt, copy=False)
        st = store.adam.get(name)
        if st is None:
            st = store.adam[name] = AdamState(0, np.zeros_like(p.data), np.zeros_like(p.data))
        st.step += 1
        st.m *= dt.type(beta1)
        st.m += dt.type(1 - beta1) * g
        st.v *= dt.type(beta2)
        st.v += dt.type(1 - beta2) * (g * g)
        mhat = st.m / dt.type(1 - beta1 ** st.step)
        vhat = st.v / dt.type(1 - beta2 ** st.step)
        p.data -= dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))
    return store
