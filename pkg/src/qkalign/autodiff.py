"""Dense float64 tensors with tape-based reverse-mode differentiation.

Scope is deliberately small: the 2-D/3-D (plus head-batched 4-D) dense
operations that the pose transformer, its losses, and the optimizer need.
Everything runs in double precision. Operations never mutate their inputs,
so each backward rule is a pure function of saved forward values.

Recording model: one active Graph per thread. Any op whose inputs require
gradients appends a node to the active graph, in creation order (which is
a valid topological order). ``backward(root)`` sweeps that tape once in
reverse and then clears it; run one backward per recorded forward.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Graph",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "linear",
    "softmax_rows",
    "layer_norm",
    "relu",
    "exp",
    "log",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "concat",
    "head_scores",
    "head_mix",
    "gather_rows",
    "expand_batch",
    "vector_norm",
    "normalize",
]


class Tensor:
    """A dense float64 array plus gradient metadata.

    ``grad`` is materialized during backward and, when present, always has
    the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division only supports scalar divisors")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backprop")

    def __init__(self, out, parents, backprop):
        self.out = out
        self.parents = parents
        self.backprop = backprop


class Graph:
    """Operation records in creation order; one active graph per thread."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_tls = threading.local()


def _active_graph() -> Graph:
    graph = getattr(_tls, "graph", None)
    if graph is None:
        graph = Graph()
        _tls.graph = graph
    return graph


def _recording() -> bool:
    return not getattr(_tls, "grad_disabled", 0)


@contextmanager
def no_grad():
    """Disable tape recording inside the context (forward-only compute)."""
    _tls.grad_disabled = getattr(_tls, "grad_disabled", 0) + 1
    try:
        yield
    finally:
        _tls.grad_disabled -= 1


def _make(out_data, parents, backprop) -> Tensor:
    track = _recording() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        _active_graph().nodes.append(_Node(out, tuple(parents), backprop))
    return out


def backward(root: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``root``.

    Walks the active tape exactly once, in reverse creation order, then
    clears it. A constant root (nothing recorded) is a no-op.
    """
    if root.data.size != 1:
        raise ContractError(
            f"backward root must be a scalar, got shape {root.data.shape}"
        )
    graph = _active_graph()
    try:
        if not root.requires_grad:
            return
        seed = np.ones_like(root.data)
        root.grad = seed if root.grad is None else root.grad + seed
        for node in reversed(graph.nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            parent_grads = node.backprop(out_grad)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
    finally:
        graph.clear()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backprop(g, ash=a.data.shape, bsh=b.data.shape):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _make(out, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backprop(g, ash=a.data.shape, bsh=b.data.shape):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _make(out, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backprop(g, ad=a.data, bd=b.data):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(out, (a, b), backprop)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c) -> Tensor:
    """Multiply by a python scalar constant (no gradient to ``c``)."""
    a = _wrap(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Strict 2-D matrix product; use einsum2/linear for batched contractions."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = a.data @ b.data

    def backprop(g, ad=a.data, bd=b.data):
        return g @ bd.T, ad.T @ g

    return _make(out, (a, b), backprop)


def linear(x, w, b) -> Tensor:
    """Affine map on the last axis: (..., Din) @ (Din, Dout) + (Dout,)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(
            f"linear expects 2-D weight and 1-D bias, got {w.data.shape}, {b.data.shape}"
        )
    din, dout = w.data.shape
    if x.data.shape[-1] != din or b.data.shape[0] != dout:
        raise DimensionError(
            f"linear shapes incompatible: x={x.data.shape} w={w.data.shape} b={b.data.shape}"
        )
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = (x2 @ w.data + b.data).reshape(*lead, dout)

    def backprop(g, x2=x2, wd=w.data, lead=lead):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(*lead, wd.shape[0])
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _make(out, (x, w, b), backprop)


def softmax_rows(x) -> Tensor:
    """Row-stabilized softmax over the last axis; rows sum to 1."""
    x = _wrap(x)
    # attention maps are the largest arrays in a step; keep passes few
    p = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def backprop(g, p=p):
        gx = g - (g * p).sum(axis=-1, keepdims=True)
        gx *= p
        return (gx,)

    return _make(p, (x,), backprop)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis row to zero mean / unit variance, then affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    d = x.data.shape[-1]
    if d < 1:
        raise ContractError("layer_norm needs at least one feature")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gamma.data + beta.data

    def backprop(g, y=y, inv=inv, gd=gamma.data):
        dy = g * gd
        lead_axes = tuple(range(g.ndim - 1))
        gx = inv * (
            dy
            - dy.mean(axis=-1, keepdims=True)
            - y * (dy * y).mean(axis=-1, keepdims=True)
        )
        return gx, (g * y).sum(axis=lead_axes), g.sum(axis=lead_axes)

    return _make(out, (x, gamma, beta), backprop)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g, m=mask: (g * m,))


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g, o=out: (g * o,))


def log(x) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input")
    return _make(np.log(x.data), (x,), lambda g, xd=x.data: (g / xd,))


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backprop(g, shape=x.data.shape, axes=axes, keepdims=keepdims):
        return (np.ascontiguousarray(_spread(g, shape, axes, keepdims)),)

    return _make(out, (x,), backprop)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.mean(axis=axes, keepdims=keepdims)
    if axes is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in axes]))

    def backprop(g, shape=x.data.shape, axes=axes, keepdims=keepdims, n=count):
        return (np.ascontiguousarray(_spread(g, shape, axes, keepdims)) / n,)

    return _make(out, (x,), backprop)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.data.shape} into {shape}")
    return _make(
        x.data.reshape(shape), (x,), lambda g, s=x.data.shape: (g.reshape(s),)
    )


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ContractError("concat requires at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backprop(g, splits=splits, axis=axis):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), backprop)


def head_scores(q, k) -> Tensor:
    """Per-head attention logits: (B, Nq, H, dh) x (B, Nk, H, dh) -> (B, H, Nq, Nk).

    Routed through np.matmul on transposed views so BLAS does the batched
    contraction (np.einsum would fall back to its element loop here).
    """
    q, k = _wrap(q), _wrap(k)
    if (
        q.data.ndim != 4
        or k.data.ndim != 4
        or q.data.shape[0] != k.data.shape[0]
        or q.data.shape[2:] != k.data.shape[2:]
    ):
        raise DimensionError(
            f"head_scores expects (B, N, H, dh) pairs, got {q.data.shape}, {k.data.shape}"
        )
    qt = q.data.transpose(0, 2, 1, 3)  # (B, H, Nq, dh)
    kt = k.data.transpose(0, 2, 3, 1)  # (B, H, dh, Nk)
    out = np.matmul(qt, kt)

    def backprop(g, qt=qt, kt=kt):
        gq = np.matmul(g, kt.transpose(0, 1, 3, 2)).transpose(0, 2, 1, 3)
        gk = np.matmul(qt.transpose(0, 1, 3, 2), g).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gq), np.ascontiguousarray(gk)

    return _make(out, (q, k), backprop)


def head_mix(a, v) -> Tensor:
    """Attention-weighted value mix: (B, H, Nq, Nk) x (B, Nk, H, dh) -> (B, Nq, H, dh)."""
    a, v = _wrap(a), _wrap(v)
    if (
        a.data.ndim != 4
        or v.data.ndim != 4
        or a.data.shape[0] != v.data.shape[0]
        or a.data.shape[1] != v.data.shape[2]
        or a.data.shape[3] != v.data.shape[1]
    ):
        raise DimensionError(
            f"head_mix expects (B, H, Nq, Nk) and (B, Nk, H, dh), "
            f"got {a.data.shape}, {v.data.shape}"
        )
    vt = v.data.transpose(0, 2, 1, 3)  # (B, H, Nk, dh)
    out = np.matmul(a.data, vt).transpose(0, 2, 1, 3)

    def backprop(g, ad=a.data, vt=vt):
        gt = g.transpose(0, 2, 1, 3)  # (B, H, Nq, dh)
        ga = np.matmul(gt, vt.transpose(0, 1, 3, 2))
        gv = np.matmul(ad.transpose(0, 1, 3, 2), gt).transpose(0, 2, 1, 3)
        return ga, np.ascontiguousarray(gv)

    return _make(out, (a, v), backprop)


def gather_rows(x, indices) -> Tensor:
    """Pick row ``indices[i]`` from each batch element: (B, M, D) -> (B, D)."""
    x = _wrap(x)
    idx = np.asarray(indices)
    if x.data.ndim != 3 or idx.ndim != 1 or idx.shape[0] != x.data.shape[0]:
        raise DimensionError(
            f"gather_rows expects (B, M, D) and (B,) indices, got {x.data.shape}, {idx.shape}"
        )
    if idx.dtype.kind not in "iu":
        raise ContractError("gather_rows indices must be integers")
    if np.any(idx < 0) or np.any(idx >= x.data.shape[1]):
        raise ContractError(f"gather_rows index out of range for M={x.data.shape[1]}")
    batch = np.arange(x.data.shape[0])
    out = x.data[batch, idx]

    def backprop(g, shape=x.data.shape, idx=idx, batch=batch):
        gx = np.zeros(shape)
        np.add.at(gx, (batch, idx), g)
        return (gx,)

    return _make(out, (x,), backprop)


def expand_batch(x, n: int) -> Tensor:
    """Tile a parameter across a leading batch axis of size ``n``."""
    x = _wrap(x)
    out = np.broadcast_to(x.data[None], (n,) + x.data.shape)
    return _make(out, (x,), lambda g: (g.sum(axis=0),))


def vector_norm(x) -> Tensor:
    """L2 norm over the last axis, with subgradient 0 at the origin."""
    x = _wrap(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def backprop(g, xd=x.data, n=n):
        safe = np.where(n == 0.0, 1.0, n)
        y = xd / safe[..., None]
        y = np.where((n == 0.0)[..., None], 0.0, y)
        return (g[..., None] * y,)

    return _make(n, (x,), backprop)


def normalize(x) -> Tensor:
    """Scale each last-axis row to unit L2 norm; zero rows are a domain error."""
    x = _wrap(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1))
    if np.any(n == 0.0):
        raise DomainError("normalize: zero-norm row has no direction")
    y = x.data / n[..., None]

    def backprop(g, y=y, n=n):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n[..., None],)

    return _make(y, (x,), backprop)
