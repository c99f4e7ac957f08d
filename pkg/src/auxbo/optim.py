"""AdamW with decoupled weight decay and bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolationError, Tensor


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus hyperparameters; ``t`` counts steps."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: dict[str, Tensor],
               grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """One AdamW update, in place on the parameter buffers.

    Weight decay is decoupled: theta -= lr * wd * theta, independent of the
    adaptive term. Moment buffers are created lazily and bias-corrected.
    """
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractViolationError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / bc1
        vhat = v / bc2
        new = p.data - state.lr * state.weight_decay * p.data
        new = new - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.data = new
    return params


class AdamW:
    """Thin object wrapper binding an OptimizerState to a parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1],
                                    eps=eps, weight_decay=weight_decay)

    def step(self, grads_by_tensor: dict[Tensor, Tensor]) -> None:
        grads = {name: grads_by_tensor[p].data for name, p in self.params.items()}
        adamw_step(self.state, self.params, grads)
