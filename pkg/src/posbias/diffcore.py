"""Small reverse-mode autodiff over numpy arrays.

Ops run eagerly. Every op that touches a gradient-requiring input records a
node holding its forward and backward closures, so the recorded
:class:`ComputeGraph` can be replayed with new leaf values (used by the
finite-difference oracle) and differentiated with :func:`backprop`.

Broadcasting is limited to adding a tensor whose shape is a trailing suffix
of the other operand's shape (bias-add, position-embedding add).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputeGraph",
    "NonFiniteError",
    "ShapeError",
    "GraphError",
    "precision",
    "default_dtype",
    "tensor",
    "matmul",
    "add",
    "mul",
    "tanh",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding",
    "concat",
    "cross_entropy",
    "reshape",
    "transpose",
    "take",
    "sum_all",
    "backprop",
    "zero_grad",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_DTYPE = np.float32


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default float type ("float32" or "float64")."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    prev = _DTYPE
    _DTYPE = np.float64 if name == "float64" else np.float32
    try:
        yield
    finally:
        _DTYPE = prev


class _Node:
    __slots__ = ("op", "parents", "fwd", "bwd", "ctx")

    def __init__(self, op, parents, fwd, bwd, ctx):
        self.op = op
        self.parents = parents
        self.fwd = fwd
        self.bwd = bwd
        self.ctx = ctx


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def op(self) -> str:
        return "leaf" if self._node is None else self._node.op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backprop(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype or _DTYPE)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DTYPE))


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{op}: {bad} non-finite value(s) in output of shape {arr.shape}")


def _apply(op: str, fwd: Callable, bwd: Callable, *parents: Tensor) -> Tensor:
    out, ctx = fwd(*(p.data for p in parents))
    _check_finite(op, out)
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(op, parents, fwd, bwd, ctx)
    return t


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has exactly
    ``a``'s leading axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    shared = b.data.ndim == 2

    def fwd(x, y):
        if shared and x.ndim > 2:
            out = (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
            return out, (x, y)
        return np.matmul(x, y), (x, y)

    def bwd(ctx, g):
        x, y = ctx
        if shared and x.ndim > 2:
            gx = (g.reshape(-1, g.shape[-1]) @ y.T).reshape(x.shape)
        else:
            gx = np.matmul(g, _swap(y))
        if shared:
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = np.matmul(_swap(x), g)
        return gx, gy

    return _apply("matmul", fwd, bwd, a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; one operand may have a trailing-suffix shape of the other."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    sa, sb = a.shape, b.shape
    if sb != sa[len(sa) - len(sb):]:
        raise ShapeError(f"add: shape {sb} is not a trailing suffix of {sa}")
    lead = tuple(range(len(sa) - len(sb)))

    def fwd(x, y):
        return x + y, None

    def bwd(ctx, g):
        return g, (g.sum(axis=lead) if lead else g)

    return _apply("add", fwd, bwd, a, b)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor, or scaling by a python float."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)

        def fwd_s(x):
            return x * x.dtype.type(s), None

        def bwd_s(ctx, g):
            return (g * g.dtype.type(s),)

        return _apply("scale", fwd_s, bwd_s, a)

    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")

    def fwd(x, y):
        return x * y, (x, y)

    def bwd(ctx, g):
        x, y = ctx
        return g * y, g * x

    return _apply("mul", fwd, bwd, a, b)


def tanh(x: Tensor) -> Tensor:
    def fwd(v):
        y = np.tanh(v)
        return y, y

    def bwd(y, g):
        return (g * (1.0 - y * y),)

    return _apply("tanh", fwd, bwd, _as_tensor(x))


def relu(x: Tensor) -> Tensor:
    def fwd(v):
        return np.maximum(v, 0), v > 0

    def bwd(mask, g):
        return (g * mask,)

    return _apply("relu", fwd, bwd, _as_tensor(x))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""

    def fwd(v):
        f = v.dtype.type
        v2 = v * v
        t = v2 * f(0.044715)
        t += 1.0
        t *= v
        t *= f(_GELU_C)
        np.tanh(t, out=t)
        y = t + 1.0
        y *= v
        y *= 0.5
        # derivative: 0.5(1+t) + 0.5 v (1-t^2) c (1 + 3a v^2)
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= v
        d *= f(0.5 * _GELU_C)
        v2 *= f(3 * 0.044715)
        v2 += 1.0
        d *= v2
        t += 1.0
        t *= 0.5
        d += t
        return y, d

    def bwd(d, g):
        return (g * d,)

    return _apply("gelu", fwd, bwd, _as_tensor(x))


def softmax(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``allowed`` is an optional boolean array matching the trailing axes of
    ``x``; disallowed entries get exactly zero probability. Every row needs
    at least one allowed entry.
    """
    x = _as_tensor(x)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != x.shape[x.data.ndim - allowed.ndim:]:
            raise ShapeError(f"softmax mask {allowed.shape} does not match {x.shape}")
        if not allowed.any(axis=-1).all():
            raise ValueError("softmax mask leaves a row with no allowed entries")

    def fwd(v):
        if allowed is not None:
            v = np.where(allowed, v, -np.inf)
        e = np.exp(v - v.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def bwd(y, g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply("softmax", fwd, bwd, x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must be ({d},), got {gain.shape}, {bias.shape}")
    lead = tuple(range(x.data.ndim - 1))

    def fwd(v, gm, bt):
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + v.dtype.type(eps))
        xhat = xc * inv
        return xhat * gm + bt, (xhat, inv, gm)

    def bwd(ctx, g):
        xhat, inv, gm = ctx
        gxhat = g * gm
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _apply("layer_norm", fwd, bwd, x, gain, bias)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def fwd(w):
        return w[ids], None

    def bwd(ctx, g):
        gw = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gw,)

    return _apply("embedding", fwd, bwd, table)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shapes incompatible on axis {axis}: {[t.shape for t in ts]}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def fwd(*arrs):
        return np.concatenate(arrs, axis=ax), None

    def bwd(ctx, g):
        return tuple(np.split(g, bounds, axis=ax))

    return _apply("concat", fwd, bwd, *ts)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape

    def fwd(v):
        return v.reshape(shape), None

    def bwd(ctx, g):
        return (g.reshape(src),)

    return _apply("reshape", fwd, bwd, x)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def fwd(v):
        return np.transpose(v, axes), None

    def bwd(ctx, g):
        return (np.transpose(g, inv),)

    return _apply("transpose", fwd, bwd, x)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along one axis with a 1-D integer index array."""
    x = _as_tensor(x)
    index = np.asarray(index)
    if index.ndim != 1:
        raise ShapeError("take expects a 1-D index")
    ax = axis % x.data.ndim

    def fwd(v):
        return np.take(v, index, axis=ax), None

    def bwd(ctx, g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(np.moveaxis(gx, ax, 0), index, np.moveaxis(g, ax, 0))
        return (gx,)

    return _apply("take", fwd, bwd, x)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    src = x.shape

    def fwd(v):
        return np.asarray(v.sum()), None

    def bwd(ctx, g):
        return (np.broadcast_to(g, src).copy(),)

    return _apply("sum", fwd, bwd, x)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over the masked rows.

    ``logits`` has shape (N, V); ``targets`` holds N integer ids; ``mask``
    (optional, N entries) selects the rows that count.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if mask is None:
        m = np.ones(n, dtype=bool)
    else:
        m = np.asarray(mask).reshape(-1).astype(bool)
        if m.shape != (n,):
            raise ShapeError(f"mask shape {m.shape} != ({n},)")
    count = int(m.sum())
    if count == 0:
        raise ValueError("cross_entropy mask selects no positions")
    rows = np.nonzero(m)[0]
    tgt = targets[rows]
    if tgt.min() < 0 or tgt.max() >= v:
        raise IndexError("target id out of range")

    def fwd(z):
        zr = z[rows]
        zs = zr - zr.max(axis=-1, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
        loss = -logp[np.arange(count), tgt].mean()
        return np.asarray(loss, dtype=z.dtype), logp

    def bwd(logp, g):
        p = np.exp(logp)
        p[np.arange(count), tgt] -= 1.0
        gz = np.zeros((n, v), dtype=logp.dtype)
        gz[rows] = p * (g / count)
        return (gz,)

    return _apply("cross_entropy", fwd, bwd, logits)


# --------------------------------------------------------------------------
# graph, gradients, oracle
# --------------------------------------------------------------------------


class ComputeGraph:
    """Topologically ordered record of the ops that produced ``outputs``."""

    def __init__(self, *outputs: Tensor):
        if not outputs:
            raise GraphError("graph needs at least one output")
        self.outputs = outputs
        self.order: list[Tensor] = []
        seen: set[int] = set()
        for out in outputs:
            stack = [(out, False)]
            while stack:
                t, done = stack.pop()
                if done:
                    self.order.append(t)
                    continue
                if id(t) in seen:
                    continue
                seen.add(id(t))
                stack.append((t, True))
                if t._node is not None:
                    for p in reversed(t._node.parents):
                        if id(p) not in seen:
                            stack.append((p, False))

    @property
    def nodes(self) -> list[Tensor]:
        return [t for t in self.order if t._node is not None]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.order if t._node is None]

    def parameters(self) -> list[Tensor]:
        return [t for t in self.leaves if t.requires_grad]

    def evaluate(self, inputs: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Recompute every node from the current leaf values.

        ``inputs`` rebinds named leaves before evaluation. Returns the output
        arrays keyed by name (or ``"out<i>"`` when unnamed).
        """
        if inputs:
            by_name = {t.name: t for t in self.leaves if t.name is not None}
            missing = set(inputs) - set(by_name)
            if missing:
                raise GraphError(f"unbound input name(s): {sorted(missing)}")
            for k, v in inputs.items():
                leaf = by_name[k]
                v = np.asarray(v, dtype=leaf.dtype)
                if v.shape != leaf.shape:
                    raise ShapeError(f"input {k!r}: shape {v.shape} != {leaf.shape}")
                leaf.data = v
        for t in self.order:
            node = t._node
            if node is None:
                continue
            out, ctx = node.fwd(*(p.data for p in node.parents))
            _check_finite(node.op, out)
            t.data = out
            node.ctx = ctx
        return {(o.name or f"out{i}"): o.data for i, o in enumerate(self.outputs)}


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def backprop(loss: Tensor | ComputeGraph) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every gradient-requiring leaf.

    Repeated calls accumulate; use :func:`zero_grad` to reset.
    """
    graph = loss if isinstance(loss, ComputeGraph) else ComputeGraph(loss)
    root = graph.outputs[0]
    if root.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("loss does not depend on any gradient-requiring tensor")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        pgrads = node.bwd(node.ctx, g)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph.parameters()


def finite_diff_check(graph: ComputeGraph, params: Sequence[Tensor] | None = None,
                      h: float = 1e-5) -> float:
    """Max relative error between backprop gradients and central differences.

    The graph must be built in float64. Leaves are restored afterwards.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    params = list(graph.parameters() if params is None else params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"finite_diff_check needs float64 tensors, {p!r} is {p.dtype}")
    total = sum(p.data.size for p in params)
    if total >= 10_000:
        raise ValueError(f"too many parameters to sweep ({total})")
    graph.evaluate()
    saved = {id(p): p.grad for p in params}
    zero_grad(params)
    backprop(graph)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}
    for p in params:
        p.grad = saved[id(p)]

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ga = analytic[id(p)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(graph.evaluate()[_out_key(graph)].reshape(()))
            flat[i] = orig - h
            down = float(graph.evaluate()[_out_key(graph)].reshape(()))
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"perturbation of {p!r}[{i}] gave a non-finite loss")
            gn = (up - down) / (2 * h)
            err = abs(ga[i] - gn) / max(abs(ga[i]), abs(gn), 1e-8)
            worst = max(worst, err)
    graph.evaluate()
    return worst


def _out_key(graph: ComputeGraph) -> str:
    o = graph.outputs[0]
    return o.name or "out0"
