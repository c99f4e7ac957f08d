"""Transformer building blocks on top of the autodiff engine.

Layers register their parameters in an ordered dict under a dotted name
prefix so checkpoints and optimizers see a stable, deterministic ordering.
Forward methods take an optional dropout generator; None means evaluation
mode (no dropout).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: list[Module] = []

    def register(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def params(self) -> dict[str, Tensor]:
        out = dict(self._params)
        for c in self._children:
            out.update(c.params())
        return out


class Linear(Module):
    def __init__(self, rng, name: str, d_in: int, d_out: int):
        super().__init__()
        self.w = self.register(f"{name}.w", glorot(rng, d_in, d_out))
        self.b = self.register(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, name: str, dim: int):
        super().__init__()
        self.gamma = self.register(f"{name}.gamma", np.ones(dim))
        self.beta = self.register(f"{name}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x) * self.gamma + self.beta


class MultiHeadAttention(Module):
    """Projected multi-head attention; masking semantics live in the engine op."""

    def __init__(self, rng, name: str, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = self.child(Linear(rng, f"{name}.wq", dim, dim))
        self.wk = self.child(Linear(rng, f"{name}.wk", dim, dim))
        self.wv = self.child(Linear(rng, f"{name}.wv", dim, dim))
        self.wo = self.child(Linear(rng, f"{name}.wo", dim, dim))

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray) -> Tensor:
        att = ad.masked_multihead_attention(
            self.wq(x_q), self.wk(x_kv), self.wv(x_kv), mask, self.heads)
        return self.wo(att)


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, rng, name: str, dim: int, heads: int):
        super().__init__()
        self.ln1 = self.child(LayerNorm(f"{name}.ln1", dim))
        self.attn = self.child(MultiHeadAttention(rng, f"{name}.attn", dim, heads))
        self.ln2 = self.child(LayerNorm(f"{name}.ln2", dim))
        self.ff1 = self.child(Linear(rng, f"{name}.ff1", dim, 4 * dim))
        self.ff2 = self.child(Linear(rng, f"{name}.ff2", 4 * dim, dim))

    def __call__(self, x: Tensor, mask: np.ndarray, drop: float,
                 rng: np.random.Generator | None) -> Tensor:
        h = self.ln1(x)
        a = self.attn(h, h, mask)
        if rng is not None and drop > 0.0:
            a = ad.dropout(a, drop, rng)
        x = x + a
        h = self.ff2(ad.gelu(self.ff1(self.ln2(x))))
        if rng is not None and drop > 0.0:
            h = ad.dropout(h, drop, rng)
        return x + h


class TransformerStack(Module):
    def __init__(self, rng, name: str, dim: int, heads: int, layers: int):
        super().__init__()
        self.blocks = [self.child(TransformerBlock(rng, f"{name}.block{i}", dim, heads))
                       for i in range(layers)]
        self.ln_out = self.child(LayerNorm(f"{name}.ln_out", dim))

    def __call__(self, x: Tensor, mask: np.ndarray, drop: float,
                 rng: np.random.Generator | None) -> Tensor:
        for block in self.blocks:
            x = block(x, mask, drop, rng)
        return self.ln_out(x)


class MLP(Module):
    """Two-layer GELU MLP."""

    def __init__(self, rng, name: str, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.l1 = self.child(Linear(rng, f"{name}.l1", d_in, d_hidden))
        self.l2 = self.child(Linear(rng, f"{name}.l2", d_hidden, d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(ad.gelu(self.l1(x)))
