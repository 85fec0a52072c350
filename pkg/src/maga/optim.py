"""Parameter store and AdamW."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


class ParamStore(dict):
    """Ordered ``name -> ndarray`` mapping plus a role tag per parameter.

    Roles are ``weight`` (decayed), ``bias``, ``norm`` and ``embed``.
    """

    def __init__(self, *args, roles=None, **kw):
        super().__init__(*args, **kw)
        self.roles = dict(roles or {})

    def add(self, name, value, role="weight"):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        self[name] = np.array(value, dtype=np.float64)
        self.roles[name] = role

    def tensors(self):
        """Fresh gradient-tracked leaves, one per parameter."""
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.items()}

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self.items()}, roles=self.roles)

    def n_values(self):
        return int(sum(v.size for v in self.values()))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One AdamW update; returns a new :class:`ParamStore` and advances ``state``.

    Decoupled weight decay applies to parameters whose role is ``weight``.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = ParamStore(roles=params.roles)
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        decay = state.weight_decay if params.roles.get(name, "weight") == "weight" else 0.0
        new = p * (1.0 - state.lr * decay)
        new = new - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = new
    return out
