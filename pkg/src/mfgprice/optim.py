"""Adam updates for ParamSet weights, with a descent and an ascent mode."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatchError
from .networks import ParamSet


@dataclass
class AdamState:
    """First and second moment accumulators, keyed like ParamSet.items()."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 1e-3, **kw) -> "AdamState":
        m = {name: np.zeros_like(a) for name, a in params.items()}
        v = {name: np.zeros_like(a) for name, a in params.items()}
        return cls(lr=lr, m=m, v=v, **kw)


def adam_step(state: AdamState, params: ParamSet, grads: dict, direction: str = "descent"):
    """One in-place Adam update; 'ascent' negates the gradient first.

    Because the sign flip happens before the moment updates, running the
    same state through ascent instead of descent negates the applied
    update exactly.
    """
    if direction not in ("descent", "ascent"):
        raise ValueError(f"unknown direction {direction!r}")
    sign = -1.0 if direction == "ascent" else 1.0
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, a in params.items():
        g = grads[name]
        if g.shape != a.shape:
            raise ShapeMismatchError(f"{name}: gradient {g.shape} against parameter {a.shape}")
        g = sign * g
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        a -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
