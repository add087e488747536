"""ADAM with bias-corrected moment estimates.

Training maximizes a log-likelihood; callers pass the gradient of the
*negated* objective so that :func:`adam_step` always descends.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Update ``params`` in place (arrays are mutated) and return them.

    ``params`` and ``grads`` map names to arrays of identical shape. Scalars
    should be wrapped as 0-d or 1-element arrays so they can be mutated.
    """
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise DimensionError(f"gradient names do not match parameter names: {missing}")
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in params:
        p, g = params[name], np.asarray(grads[name], dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
