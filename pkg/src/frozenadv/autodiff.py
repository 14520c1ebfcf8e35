"""Dense reverse-mode automatic differentiation on numpy arrays.

A :class:`Graph` is an append-only tape.  Every call to :meth:`Graph.forward_op`
evaluates one operation eagerly and records its parents, so node ids are
topologically ordered by construction and :meth:`Graph.backward` is a single
reverse sweep over the tape.

Values are float64 numpy arrays.  Nothing in the differentiable path mutates
an array that is already on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_LN_EPS = 1e-5
_COS_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes it cannot combine."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NonScalarRootError(ValueError):
    pass


@dataclass
class Node:
    id: int
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    params: dict = field(default_factory=dict)
    requires_grad: bool = False
    grad: np.ndarray | None = None
    ctx: Any = None


def sign(t: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sign(0) == 0``."""
    return np.sign(np.asarray(t, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# op implementations: forward(*values, **params) -> (out, ctx)
#                     backward(g, ctx, *values, **params) -> tuple of grads
# --------------------------------------------------------------------------

def _add_f(a, b):
    _check_broadcast("add", a, b)
    return a + b, None


def _add_b(g, ctx, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_f(a, b):
    _check_broadcast("sub", a, b)
    return a - b, None


def _sub_b(g, ctx, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_f(a, b):
    _check_broadcast("mul", a, b)
    return a * b, None


def _mul_b(g, ctx, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_f(a, b):
    _check_broadcast("div", a, b)
    return a / b, None


def _div_b(g, ctx, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _scale_f(a, factor):
    return a * factor, None


def _scale_b(g, ctx, a, factor):
    return (g * factor,)


def _matmul_f(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    return np.matmul(a, b), None


def _matmul_b(g, ctx, a, b, needs=(True, True)):
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape) if needs[0] else None
    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape) if needs[1] else None
    return ga, gb


def _linear_f(x, w, b):
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    return x @ w + b, None


def _linear_b(g, ctx, x, w, b, needs=(True, True, True)):
    gx = g @ w.T if needs[0] else None
    if not (needs[1] or needs[2]):
        return gx, None, None
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return gx, x2.T @ g2, g2.sum(axis=0)


def _conv1d_f(x, w, b, stride=1, padding=0):
    # x: (B, L, Cin); w: (K, Cin, Cout); b: (Cout,)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1] or b.shape != (w.shape[2],):
        raise ShapeError("conv1d", x.shape, w.shape, b.shape)
    k = w.shape[0]
    xp = np.pad(x, ((0, 0), (padding, padding), (0, 0))) if padding else x
    if xp.shape[1] < k:
        raise ShapeError("conv1d", x.shape, w.shape, detail="input shorter than kernel")
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride]
    bsz, lout, cin, _ = win.shape
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(bsz * lout, k * cin)
    out = (cols @ w.reshape(k * cin, -1) + b).reshape(bsz, lout, -1)
    return out, (cols, xp.shape)


def _conv1d_b(g, ctx, x, w, b, stride=1, padding=0, needs=(True, True, True)):
    cols, padded_shape = ctx
    k, cin, cout = w.shape
    bsz, lout, _ = g.shape
    g2 = g.reshape(bsz * lout, cout)
    gw = (cols.T @ g2).reshape(k, cin, cout) if needs[1] else None
    gb = g2.sum(axis=0) if needs[2] else None
    if not needs[0]:
        return None, gw, gb
    gcols = (g2 @ w.reshape(k * cin, cout).T).reshape(bsz, lout, k, cin)
    gxp = np.zeros(padded_shape)
    span = stride * (lout - 1) + 1
    for j in range(k):
        gxp[:, j:j + span:stride, :] += gcols[:, :, j, :]
    gx = gxp[:, padding:padded_shape[1] - padding, :] if padding else gxp
    return gx, gw, gb


def _relu_f(x):
    return np.maximum(x, 0.0), None


def _relu_b(g, ctx, x):
    return (g * (x > 0),)


def _gelu_f(x):
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_b(g, t, x):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def _tanh_f(x):
    y = np.tanh(x)
    return y, y


def _tanh_b(g, y, x):
    return (g * (1.0 - y * y),)


def _layernorm_f(x, gamma, beta):
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError("layernorm", x.shape, gamma.shape, beta.shape)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layernorm_b(g, ctx, x, gamma, beta):
    xhat, inv = ctx
    lead = tuple(range(x.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gx_hat = g * gamma
    gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    return gx, ggamma, gbeta


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_f(x, axis=-1):
    y = _softmax(x, axis)
    return y, y


def _softmax_b(g, y, x, axis=-1):
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _sdpa_f(q, k, v, mask=None):
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("scaled-dot-product-attention", q.shape, k.shape, v.shape)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        scores = np.where(mask, scores, -1e30)
    attn = _softmax(scores, -1)
    return np.matmul(attn, v), (attn, scale)


def _sdpa_b(g, ctx, q, k, v, mask=None):
    attn, scale = ctx
    gv = np.matmul(np.swapaxes(attn, -1, -2), g)
    gattn = np.matmul(g, np.swapaxes(v, -1, -2))
    gscores = attn * (gattn - (gattn * attn).sum(axis=-1, keepdims=True)) * scale
    gq = np.matmul(gscores, k)
    gk = np.matmul(np.swapaxes(gscores, -1, -2), q)
    return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape)


def _meanpool_f(x):
    if x.ndim < 2:
        raise ShapeError("mean-pool", x.shape, detail="needs a time axis")
    return x.mean(axis=-2), None


def _meanpool_b(g, ctx, x):
    n = x.shape[-2]
    return (np.broadcast_to(np.expand_dims(g, -2) / n, x.shape).copy(),)


def _sum_f(x, axis=None):
    return np.asarray(x.sum(axis=axis)), None


def _sum_b(g, ctx, x, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _l2norm_f(x, axis=None):
    n = np.sqrt((x * x).sum(axis=axis))
    return np.asarray(n), None


def _l2norm_b(g, ctx, x, axis=None):
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if axis is not None:
        g = np.expand_dims(g, axis)
    # subgradient 0 at the origin
    return (np.where(n > 0, g * x / np.where(n > 0, n, 1.0), 0.0),)


def _mse_f(a, b):
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    d = a - b
    return np.asarray((d * d).mean()), d


def _mse_b(g, d, a, b):
    ga = g * 2.0 * d / d.size
    return ga, -ga


def _xent_f(logits, labels=None):
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross-entropy", logits.shape, labels.shape)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    return np.asarray(-logp[rows, labels].mean()), logp


def _xent_b(g, logp, logits, labels=None):
    p = np.exp(logp)
    p[np.arange(len(labels)), labels] -= 1.0
    return (g * p / len(labels),)


def _cos_f(a, b, axis=-1):
    _check_broadcast("cosine-similarity", a, b)
    na = np.maximum(np.sqrt((a * a).sum(axis=axis, keepdims=True)), _COS_EPS)
    nb = np.maximum(np.sqrt((b * b).sum(axis=axis, keepdims=True)), _COS_EPS)
    dot = (a * b).sum(axis=axis, keepdims=True)
    return np.squeeze(dot / (na * nb), axis=axis), (na, nb, dot)


def _cos_b(g, ctx, a, b, axis=-1):
    na, nb, dot = ctx
    g = np.expand_dims(g, axis)
    ga = g * (b / (na * nb) - dot * a / (na ** 3 * nb))
    gb = g * (a / (na * nb) - dot * b / (na * nb ** 3))
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _slice_f(x, key=None):
    return x[key].copy(), None


def _slice_b(g, ctx, x, key=None):
    gx = np.zeros_like(x)
    gx[key] = g
    return (gx,)


def _index_f(x, index=None):
    # gather along the leading axis; index may be any integer array
    return x[np.asarray(index)], None


def _index_b(g, ctx, x, index=None):
    gx = np.zeros_like(x)
    np.add.at(gx, np.asarray(index), g)
    return (gx,)


def _concat_f(*xs, axis=0):
    try:
        return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None


def _concat_b(g, sizes, *xs, axis=0):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _reshape_f(x, shape=None):
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None


def _reshape_b(g, ctx, x, shape=None):
    return (g.reshape(x.shape),)


def _transpose_f(x, axes=None):
    return np.transpose(x, axes), None


def _transpose_b(g, ctx, x, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return (np.transpose(g, inv),)


def _maskfill_f(x, fill, mask=None):
    mask = np.asarray(mask, dtype=bool)
    try:
        return np.where(mask, fill, x), mask
    except ValueError:
        raise ShapeError("mask-fill", x.shape, fill.shape, mask.shape) from None


def _maskfill_b(g, m, x, fill, mask=None):
    return np.where(m, 0.0, g), _unbroadcast(np.where(m, g, 0.0), fill.shape)


# backward functions that accept a ``needs`` mask and skip unneeded grads
_NEEDS_AWARE = {"matmul", "linear", "conv1d"}

OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "div": (_div_f, _div_b),
    "scale": (_scale_f, _scale_b),
    "matmul": (_matmul_f, _matmul_b),
    "linear": (_linear_f, _linear_b),
    "conv1d": (_conv1d_f, _conv1d_b),
    "relu": (_relu_f, _relu_b),
    "gelu": (_gelu_f, _gelu_b),
    "tanh": (_tanh_f, _tanh_b),
    "layernorm": (_layernorm_f, _layernorm_b),
    "softmax": (_softmax_f, _softmax_b),
    "scaled-dot-product-attention": (_sdpa_f, _sdpa_b),
    "mean-pool": (_meanpool_f, _meanpool_b),
    "sum": (_sum_f, _sum_b),
    "l2-norm": (_l2norm_f, _l2norm_b),
    "mse": (_mse_f, _mse_b),
    "cross-entropy": (_xent_f, _xent_b),
    "cosine-similarity": (_cos_f, _cos_b),
    "slice": (_slice_f, _slice_b),
    "index": (_index_f, _index_b),
    "concat": (_concat_f, _concat_b),
    "reshape": (_reshape_f, _reshape_b),
    "transpose": (_transpose_f, _transpose_b),
    "mask-fill": (_maskfill_f, _maskfill_b),
}


class Graph:
    """Append-only computation tape.

    ``mode="frozen"`` makes :meth:`param` return constants, so backward only
    flows to explicit inputs (the attack's view of a frozen encoder).
    ``debug=True`` counts pending consumers during backward and fails loudly
    if a gradient is read before every consumer has contributed to it.
    """

    def __init__(self, mode: str = "training", debug: bool = False):
        if mode not in ("training", "frozen"):
            raise ValueError(f"unknown graph mode {mode!r}")
        self.mode = mode
        self.debug = debug
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, parents, value, params=None, requires_grad=False, ctx=None) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, tuple(parents), value, params or {}, requires_grad, None, ctx))
        return nid

    def input(self, value, requires_grad: bool = True) -> int:
        v = np.array(value, dtype=np.float64)
        return self._append("input", (), v, requires_grad=requires_grad)

    def const(self, value) -> int:
        return self.input(value, requires_grad=False)

    def param(self, value) -> int:
        """Leaf holding a model weight; differentiable only in training mode."""
        v = np.asarray(value, dtype=np.float64)
        return self._append("param", (), v, requires_grad=self.mode == "training")

    def forward_op(self, op: str, inputs, **params) -> int:
        try:
            fwd, _ = OPS[op]
        except KeyError:
            raise ValueError(f"unsupported op {op!r}") from None
        inputs = tuple(int(i) for i in inputs)
        vals = [self.nodes[i].value for i in inputs]
        out, ctx = fwd(*vals, **params)
        rg = any(self.nodes[i].requires_grad for i in inputs)
        return self._append(op, inputs, np.asarray(out, dtype=np.float64), params, rg, ctx if rg else None)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def grad(self, nid: int) -> np.ndarray | None:
        return self.nodes[nid].grad

    def backward(self, root: int) -> None:
        """Populate ``grad`` on every differentiable node reachable from ``root``.

        Grads from earlier calls are discarded, never accumulated.
        """
        rv = self.nodes[root].value
        if rv.size != 1 or rv.ndim > 1:
            raise NonScalarRootError(f"backward root must be scalar, got shape {rv.shape}")
        for n in self.nodes:
            n.grad = None
        if not self.nodes[root].requires_grad:
            return
        pending = self._consumer_counts(root) if self.debug else None
        self.nodes[root].grad = np.ones_like(rv)
        for nid in range(root, -1, -1):
            node = self.nodes[nid]
            if node.grad is None:
                continue
            if pending is not None and pending[nid]:
                raise RuntimeError(f"grad of node {nid} ({node.op}) read with "
                                   f"{pending[nid]} consumer(s) still pending")
            if not node.parents:
                continue
            _, bwd = OPS[node.op]
            vals = [self.nodes[p].value for p in node.parents]
            if node.op in _NEEDS_AWARE:
                needs = tuple(self.nodes[p].requires_grad for p in node.parents)
                grads = bwd(node.grad, node.ctx, *vals, needs=needs, **node.params)
            else:
                grads = bwd(node.grad, node.ctx, *vals, **node.params)
            for p, gp in zip(node.parents, grads):
                parent = self.nodes[p]
                if gp is None or not parent.requires_grad:
                    continue
                parent.grad = gp.copy() if parent.grad is None else parent.grad + gp
            if pending is not None:
                for p in set(node.parents):
                    pending[p] -= 1

    def _consumer_counts(self, root: int) -> list[int]:
        reach = self._reachable(root)
        counts = [0] * len(self.nodes)
        for nid in reach:
            node = self.nodes[nid]
            if node.requires_grad:
                for p in set(node.parents):
                    counts[p] += 1
        return counts

    def _reachable(self, root: int) -> set[int]:
        seen = {root}
        stack = [root]
        while stack:
            for p in self.nodes[stack.pop()].parents:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    # thin conveniences for model code
    def op(self, name, *inputs, **params) -> int:
        return self.forward_op(name, inputs, **params)


def forward_op(graph: Graph, op: str, inputs, **params) -> int:
    return graph.forward_op(op, inputs, **params)


def backward(graph: Graph, root: int) -> None:
    graph.backward(root)
