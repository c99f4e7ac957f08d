"""Minimal reverse-mode autodiff on dense float64 numpy buffers.

Every op returns a fresh ``Tensor`` holding a row-major float64 array and,
while gradient recording is enabled, a closure that maps the output gradient
back onto the op's parents. The tape is pure: ``backward`` never mutates the
graph, so a recorded graph can be differentiated repeatedly.
"""

from __future__ import annotations

import contextlib
from typing import Iterable

import numpy as np
import scipy.linalg
from scipy.special import erf as _erf, expit as _expit


class ContractViolationError(ValueError):
    """An op was called outside its documented contract."""


class NumericFailureError(ArithmeticError):
    """A computation produced non-finite results or a factorization failed."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 tensor with optional gradient tracking.

    Tensors are immutable once produced by an op; parameters are the only
    tensors whose ``data`` is rewritten (by the optimizer, between graphs).
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else tuple(shape[0]))

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(out_data, parents, vjp) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(out, (a, b), vjp)


def pow_(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
    out = x * cdf
    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)
    return _make(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _expit(a.data),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def take(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    def vjp(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)
    return _make(out, (a,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)
    return _make(out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), _as_tensor(1.0 / n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics; operands must be >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolationError("matmul requires operands with ndim >= 2")
    out = a.data @ b.data
    need_a = a.requires_grad
    need_b = b.requires_grad
    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if need_b else None
        return (ga, gb)
    return _make(out, (a, b), vjp)


def masked_fill(a: Tensor, fill: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``fill`` is True by ``value``; their gradient is 0."""
    fill = np.asarray(fill, dtype=bool)
    out = np.where(fill, value, a.data)
    keep = ~fill
    return _make(out, (a,), lambda g: (_unbroadcast(np.where(keep, g, 0.0), a.shape),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows of all -inf are a caller error."""
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _make(out, (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _make(xhat, (a,), vjp)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a caller-supplied generator (replayable masks)."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolationError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def cholesky(a: Tensor) -> Tensor:
    """Lower Cholesky factor; raises NumericFailureError if not posdef."""
    try:
        out = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError as e:
        raise NumericFailureError(f"Cholesky factorization failed: {e}") from e
    def vjp(g):
        L = out
        n = L.shape[-1]
        # Murray (2016): abar = (S + S^T)/2, S = L^-T phi(L^T g) L^-1
        M = np.swapaxes(L, -1, -2) @ g
        P = np.tril(M) / (1.0 + np.eye(n))
        Y = scipy.linalg.solve_triangular(L, P.T, lower=True, trans="T").T
        S = scipy.linalg.solve_triangular(L, Y, lower=True, trans="T")
        return ((S + S.T) / 2.0,)
    return _make(out, (a,), vjp)


def solve_triangular(l: Tensor, b: Tensor, trans: bool = False) -> Tensor:
    """Solve op(L) x = b for lower-triangular L (op = transpose if trans)."""
    out = scipy.linalg.solve_triangular(l.data, b.data, lower=True, trans="T" if trans else "N")
    def vjp(g):
        gb = scipy.linalg.solve_triangular(l.data, g, lower=True, trans="N" if trans else "T")
        x = out if out.ndim == 2 else out[:, None]
        gbm = gb if gb.ndim == 2 else gb[:, None]
        if trans:
            gl = -(x @ gbm.T)
        else:
            gl = -(gbm @ x.T)
        return (np.tril(gl), gb.reshape(b.shape))
    return _make(out, (l, b), vjp)


def diagonal(a: Tensor) -> Tensor:
    out = np.diagonal(a.data).copy()
    def vjp(g):
        full = np.zeros(a.shape)
        np.fill_diagonal(full, g)
        return (full,)
    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# attention and losses
# ---------------------------------------------------------------------------


def masked_multihead_attention(queries: Tensor, keys: Tensor, values: Tensor,
                               mask: np.ndarray, heads: int) -> Tensor:
    """Scaled dot-product attention with the last axis split across heads.

    ``mask[i, j]`` is True iff query token i may attend to key token j;
    masked positions receive exactly zero attention weight. Accepts 2-D
    ``[n, d]`` inputs or 3-D ``[batch, n, d]`` with a broadcastable mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractViolationError("attention mask has a query row with no allowed keys")
    d = queries.shape[-1]
    if d % heads != 0:
        raise ContractViolationError(f"feature dim {d} not divisible by heads {heads}")
    dh = d // heads
    batched = queries.ndim == 3

    def split(t: Tensor, n: int) -> Tensor:
        if batched:
            b = t.shape[0]
            return transpose(reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))
        return transpose(reshape(t, (n, heads, dh)), (1, 0, 2))

    nq, nk = queries.shape[-2], keys.shape[-2]
    q = split(queries, nq)
    k = split(keys, nk)
    v = split(values, nk)
    scores = mul(matmul(q, swap_last2(k)), _as_tensor(1.0 / np.sqrt(dh)))
    # broadcast mask over the head axis (and the batch axis for a shared 2-D mask)
    if batched and mask.ndim == 3:
        mexp = mask[:, None, :, :]
    else:
        mexp = mask
    scores = masked_fill(scores, ~np.broadcast_to(mexp, scores.data.shape), -np.inf)
    att = softmax(scores, axis=-1)
    out = matmul(att, v)
    if batched:
        b = queries.shape[0]
        return reshape(transpose(out, (0, 2, 1, 3)), (b, nq, d))
    return reshape(transpose(out, (1, 0, 2)), (nq, d))


def gaussian_nll(y, mu: Tensor, sigma: Tensor) -> Tensor:
    """Elementwise -log N(y; mu, sigma^2): 0.5*log(2*pi*sigma^2) + (y-mu)^2/(2*sigma^2)."""
    sigma_arr = sigma.data if isinstance(sigma, Tensor) else np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr <= 0.0):
        raise ContractViolationError("gaussian_nll requires sigma > 0")
    y = _as_tensor(y)
    mu = _as_tensor(mu)
    sigma = _as_tensor(sigma)
    resid = sub(y, mu)
    var = mul(sigma, sigma)
    return add(
        mul(_as_tensor(0.5), log(mul(_as_tensor(2.0 * np.pi), var))),
        div(mul(resid, resid), mul(_as_tensor(2.0), var)),
    )


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Standard sin/cos positional-encoding table of shape [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Differentiate a scalar loss; returns {leaf tensor: gradient tensor}.

    When ``params`` is given, the map covers exactly those tensors (zeros for
    any not on the recorded graph); otherwise it covers every requires_grad
    leaf reachable from ``loss``. The graph itself is left intact.
    """
    if loss.shape != ():
        raise ContractViolationError(f"backward expects a scalar loss, got shape {loss.shape}")
    if np.isnan(loss.data):
        raise NumericFailureError("loss is NaN")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
                by_id[id(p)] = p

    result: dict[Tensor, Tensor] = {}
    if params is not None:
        for p in params:
            g = grads.get(id(p))
            result[p] = Tensor(g if g is not None else np.zeros(p.shape))
        return result
    for tid, t in by_id.items():
        if t.requires_grad and t._vjp is None:
            result[t] = Tensor(grads[tid])
    return result
