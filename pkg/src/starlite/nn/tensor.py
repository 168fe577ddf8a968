"""Dense float32 tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous float32 ndarray and records the op that produced it
(op kind, parent tensors, non-tensor context), forming an implicit acyclic graph.
`backward(loss)` walks that graph in reverse topological order and accumulates
gradients into `.grad` of every tensor with `requires_grad`.

Design constraints kept deliberately tight:
  - float32 data everywhere; gradients are float32 ndarrays.
  - broadcasting in add/mul follows numpy rules, with gradients summed back to the
    operand shapes; everything else requires exact shapes.
  - ops are pure; a fixed build sequence yields a stable topological order, so
    results are bit-identical across runs on one platform.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "exp",
    "gelu",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "sum_axis",
    "embedding",
    "layer_norm",
    "softmax",
    "unit_normalize",
    "rotate_pairs",
    "cross_entropy",
    "softmax_cross_entropy",
    "backward",
    "topo_order",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "normal_param",
    "zeros_param",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx", "_backward_fn", "_grad_shared")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        ctx: tuple = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self._grad_shared = False
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        # first contribution aliases the producer's buffer; a second contribution
        # allocates, so shared buffers are never mutated in place
        if self.grad is None:
            self.grad = g
            self._grad_shared = True
        elif self._grad_shared:
            self.grad = self.grad + g
            self._grad_shared = False
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_shared = False

    def backward(self) -> None:
        backward(self)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what} (op={self.op})")
        return self

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def normal_param(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=tuple(shape)), requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float32), requires_grad=True)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], ctx: tuple, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, ctx=ctx, backward_fn=backward_fn)
    return Tensor(data, requires_grad=False, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape).astype(np.float32, copy=False)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), (), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(out, "sub", (a, b), (), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), (), back)


def matmul(a, b) -> Tensor:
    """Matrix product contracting the last axis of `a` with the second-to-last of `b`.

    `a` is (..., m, k); `b` is (k, n) or has batch dims identical to `a`'s.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dimensions must match exactly: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(gb)

    return _make(out, "matmul", (a, b), (), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def back(g, a=a, out=out):
        a.accumulate_grad(g * out)

    return _make(out, "exp", (a,), (), back)


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g, a=a, x=x, t=t):
        sech2 = 1.0 - t * t
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du))

    return _make(out.astype(np.float32, copy=False), "gelu", (a,), (), back)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def back(g, a=a):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _make(out, "reshape", (a,), (shape,), back)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def back(g, a=a, inv=inv):
        a.accumulate_grad(g.transpose(inv))

    return _make(out, "transpose", (a,), (axes,), back)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g, ts=ts, offsets=offsets, axis=axis):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(out, "concat", tuple(ts), (axis, tuple(sizes)), back)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    out = a.data[tuple(idx)]

    def back(g, a=a, idx=tuple(idx)):
        full = np.zeros_like(a.data)
        full[idx] = g
        a.accumulate_grad(full)

    return _make(out, "narrow", (a,), (axis, start, length), back)


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g, a=a, axis=axis, keepdims=keepdims):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).astype(np.float32, copy=False))

    return _make(out, "sum_axis", (a,), (axis, keepdims), back)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup: table is (V, d), ids any integer shape; out is ids.shape + (d,)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def back(g, table=table, ids=ids):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table.accumulate_grad(gt)

    return _make(out, "embedding", (table,), (ids,), back)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned gain/bias."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def back(g, a=a, gain=gain, bias=bias, xhat=xhat, inv=inv):
        d = xhat.shape[-1]
        if gain.requires_grad:
            gain.accumulate_grad(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate_grad(_unbroadcast(g, bias.data.shape))
        if a.requires_grad:
            gx = g * gain.data
            term1 = gx
            term2 = gx.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(((term1 - term2 - term3) * inv).astype(np.float32, copy=False))

    return _make(out.astype(np.float32, copy=False), "layer_norm", (a, gain, bias), (eps,), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g, a=a, out=out, axis=axis):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a.accumulate_grad(((g - dot) * out).astype(np.float32, copy=False))

    return _make(out.astype(np.float32, copy=False), "softmax", (a,), (axis,), back)


def unit_normalize(a, eps: float = 1e-6) -> Tensor:
    """x / ||x|| over the last axis (smooth near zero via eps^2 under the root)."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps * eps)
    out = x / n

    def back(g, a=a, out=out, n=n):
        dot = (g * out).sum(axis=-1, keepdims=True)
        a.accumulate_grad(((g - out * dot) / n).astype(np.float32, copy=False))

    return _make(out.astype(np.float32, copy=False), "unit_normalize", (a,), (eps,), back)


def rotate_pairs(a) -> Tensor:
    """(x0, x1, x2, x3, ...) -> (-x1, x0, -x3, x2, ...): the 90-degree pair rotation."""
    a = as_tensor(a)
    x = a.data
    if x.shape[-1] % 2:
        raise ValueError("rotate_pairs requires an even last dimension")
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]

    def back(g, a=a):
        gx = np.empty_like(g)
        gx[..., 1::2] = -g[..., 0::2]
        gx[..., 0::2] = g[..., 1::2]
        a.accumulate_grad(gx)

    return _make(out, "rotate_pairs", (a,), (), back)


def cross_entropy(logits, targets: np.ndarray, select: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over rows.

    logits is (N, V); targets is (N,) integer; `select` optionally restricts the mean
    to a boolean subset of rows (unselected rows get zero gradient).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target index out of range [0, {v})")
    if select is None:
        sel = np.ones(n, dtype=bool)
    else:
        sel = np.asarray(select, dtype=bool)
        if sel.shape != (n,):
            raise ValueError("select mask shape must match logits rows")
    count = int(sel.sum())
    if count == 0:
        raise ValueError("cross_entropy: empty supervision set")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    nll = -logp[rows, targets]
    loss = np.float32(nll[sel].mean())

    def back(g, logits=logits, logp=logp, targets=targets, sel=sel, count=count):
        p = np.exp(logp)
        p[np.arange(len(targets)), targets] -= 1.0
        p[~sel] = 0.0
        logits.accumulate_grad((p * (float(g) / count)).astype(np.float32, copy=False))

    return _make(loss, "cross_entropy", (logits,), (targets, sel), back)


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """Single-distribution form: -log softmax(logits)[target] for a length-V vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ValueError(f"softmax_cross_entropy expects a 1-d logit vector, got {logits.shape}")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range [0, {logits.shape[0]})")
    return cross_entropy(reshape(logits, (1, logits.shape[0])), np.array([target]))


def topo_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from `root`, parents before children; stable for a fixed build."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient accumulation from a scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
