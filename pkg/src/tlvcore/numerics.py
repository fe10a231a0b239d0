"""Float64 tensors with a small reverse-mode tape.

Each op returns a new :class:`Tensor` that keeps references to its parents
and a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks the graph in reverse topological order and
accumulates into :class:`Parameter` gradients.

The heavier transformer pieces (layer norm, GELU, fused multi-head
attention, linear layers) are single ops with hand-derived backward passes
so that the Python overhead per training step stays small.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DomainError,
    OracleInvalidError,
    ShapeError,
)

EPS_NORM = 1e-12
_LN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable dense float64 array that may sit on the autodiff tape."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        if _grad_enabled and parents and any(p.requires_grad for p in parents):
            self.parents = tuple(parents)
            self.backward_fn = backward_fn
            self.requires_grad = True
        else:
            self.parents = ()
            self.backward_fn = None
            self.requires_grad = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self) -> None:
        """Backpropagate from this scalar into every reachable Parameter."""
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar output")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """Named leaf tensor with a gradient accumulator."""

    __slots__ = ("name", "grad", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, dtype=np.float64, copy=True))
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor(np.log(xd), (x,), lambda g: (g / xd,))


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return Tensor(xd * cdf, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return Tensor(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(x.data[idx], (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def prepend_token(x, token) -> Tensor:
    """(N, T, d) and a (d,) token -> (N, T+1, d) with the token at position 0."""
    x, token = as_tensor(x), as_tensor(token)
    n = x.shape[0]
    tok = np.broadcast_to(token.data, (n, 1, token.shape[-1]))
    return Tensor(
        np.concatenate([tok, x.data], axis=1),
        (x, token),
        lambda g: (g[:, 1:, :], g[:, 0, :].sum(axis=0)),
    )


def embedding(ids: np.ndarray, table) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return Tensor(table.data[ids], (table,), backward)


def pick(x, index: np.ndarray) -> Tensor:
    """Row-wise gather: out[i] = x[i, index[i]] for a 2-D ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return Tensor(x.data[rows, index], (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """np.matmul for operands of rank >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return Tensor(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias with weight stored (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor(out, parents, backward)


def layer_norm(x, gamma, beta) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gflat = g.reshape(-1, g.shape[-1])
        ggamma = (gflat * xhat.reshape(gflat.shape)).sum(axis=0)
        gbeta = gflat.sum(axis=0)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return Tensor(xhat * gd + beta.data, (x, gamma, beta), backward)


def self_attention(qkv, num_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``qkv`` is (N, T, 3d) laid out as [q | k | v]; returns (N, T, d).
    """
    qkv = as_tensor(qkv)
    n, t, three_d = qkv.shape
    d = three_d // 3
    if d * 3 != three_d or d % num_heads:
        raise ShapeError(f"qkv width {three_d} incompatible with {num_heads} heads")
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)
    heads = qkv.data.reshape(n, t, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = heads[0], heads[1], heads[2]  # (N, h, T, dh)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    o = p @ v

    def backward(g):
        go = g.reshape(n, t, num_heads, dh).transpose(0, 2, 1, 3)
        gp = go @ np.swapaxes(v, -1, -2)
        gv = np.swapaxes(p, -1, -2) @ go
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ k) * scale
        gk = (np.swapaxes(gs, -1, -2) @ q) * scale
        stacked = np.stack([gq, gk, gv])  # (3, N, h, T, dh)
        return (stacked.transpose(1, 3, 0, 2, 4).reshape(n, t, three_d),)

    return Tensor(o.transpose(0, 2, 1, 3).reshape(n, t, d), (qkv,), backward)


# ---------------------------------------------------------------------------
# probability and geometry
# ---------------------------------------------------------------------------


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0 or not math.isfinite(tau):
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    return tau


def _check_logits(x: Tensor) -> None:
    if x.data.size == 0 or x.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(x.data)):
        raise DomainError("softmax logits must be finite")


def softmax_temp(logits, tau: float = 1.0) -> Tensor:
    """softmax(logits / tau) along the last axis, max-shifted for stability."""
    x = as_tensor(logits)
    tau = _check_tau(tau)
    _check_logits(x)
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau,)

    return Tensor(p, (x,), backward)


def log_softmax_temp(logits, tau: float = 1.0) -> Tensor:
    x = as_tensor(logits)
    tau = _check_tau(tau)
    _check_logits(x)
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

    return Tensor(out, (x,), backward)


def l2_normalize(v) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    v = as_tensor(v)
    if v.data.size == 0:
        raise DomainError("cannot normalize an empty vector")
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= EPS_NORM):
        raise DegenerateInputError("vector norm below eps_norm")
    u = v.data / norm

    def backward(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / norm,)

    return Tensor(u, (v,), backward)


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"dimension mismatch {a.shape} vs {b.shape}")
    return sum_(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def cosine_matrix(a, b) -> Tensor:
    """All-pairs cosine similarity of the rows of ``a`` (N, d) and ``b`` (M, d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"dimension mismatch {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data)
    return float(value)


def finite_diff_check(
    loss_fn: Callable[[object], Tensor],
    state,
    eps: float = 1e-5,
    max_coords_per_param: int | None = 16,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``state`` is anything exposing ``trainable_parameters()`` (a ModelState)
    or an iterable of Parameters. For every trainable parameter up to
    ``max_coords_per_param`` coordinates are sampled (all of them when
    ``None``) and compared as ``|g_tape - g_fd| / max(1, |g_fd|)``.
    """
    if not 0 < eps <= 1e-3:
        raise ConfigurationError(f"eps must lie in (0, 1e-3], got {eps}")
    params = _trainable(state)
    for p in params:
        p.zero_grad()
    loss = loss_fn(state)
    if isinstance(loss, Tensor):
        loss.backward()
    f0 = _scalar(loss)
    if _scalar(loss_fn(state)) != f0:
        raise OracleInvalidError("loss_fn returned different values for identical parameters")
    analytic = [p.grad.copy() for p in params]

    rng = np.random.Generator(np.random.Philox(key=[seed, 0xF1D]))
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            size = p.data.size
            if max_coords_per_param is None or size <= max_coords_per_param:
                coords = np.arange(size)
            else:
                coords = np.sort(rng.choice(size, max_coords_per_param, replace=False))
            flat = p.data.reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                fp = _scalar(loss_fn(state))
                flat[c] = orig - eps
                fm = _scalar(loss_fn(state))
                flat[c] = orig
                g_fd = (fp - fm) / (2.0 * eps)
                err = abs(ga.reshape(-1)[c] - g_fd) / max(1.0, abs(g_fd))
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def _trainable(state) -> list[Parameter]:
    if hasattr(state, "trainable_parameters"):
        return list(state.trainable_parameters())
    if isinstance(state, Parameter):
        return [state] if state.trainable else []
    return [p for p in state if p.trainable]


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
