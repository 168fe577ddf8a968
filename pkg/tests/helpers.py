"""Shared test oracles.

The centerpiece is an independent float64 re-evaluation of recorded op graphs:
central finite differences computed against it stay meaningful at tolerances where
plain float32 differencing would drown in rounding noise.
"""

from __future__ import annotations

import numpy as np

from starlite.nn.tensor import Tensor, topo_order

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _apply_f64(node: Tensor, ins: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "add":
        return ins[0] + ins[1]
    if op == "sub":
        return ins[0] - ins[1]
    if op == "mul":
        return ins[0] * ins[1]
    if op == "matmul":
        return ins[0] @ ins[1]
    if op == "exp":
        return np.exp(ins[0])
    if op == "gelu":
        x = ins[0]
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))
    if op == "reshape":
        return ins[0].reshape(node.ctx[0])
    if op == "transpose":
        return ins[0].transpose(node.ctx[0])
    if op == "concat":
        return np.concatenate(ins, axis=node.ctx[0])
    if op == "narrow":
        axis, start, length = node.ctx
        idx = [slice(None)] * ins[0].ndim
        idx[axis] = slice(start, start + length)
        return ins[0][tuple(idx)]
    if op == "sum_axis":
        axis, keepdims = node.ctx
        return ins[0].sum(axis=axis, keepdims=keepdims)
    if op == "embedding":
        return ins[0][node.ctx[0]]
    if op == "layer_norm":
        x, gain, bias = ins
        eps = node.ctx[0]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return gain * (x - mu) / np.sqrt(var + eps) + bias
    if op == "softmax":
        z = ins[0] - ins[0].max(axis=node.ctx[0], keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=node.ctx[0], keepdims=True)
    if op == "unit_normalize":
        eps = node.ctx[0]
        n = np.sqrt((ins[0] ** 2).sum(axis=-1, keepdims=True) + eps * eps)
        return ins[0] / n
    if op == "rotate_pairs":
        out = np.empty_like(ins[0])
        out[..., 0::2] = -ins[0][..., 1::2]
        out[..., 1::2] = ins[0][..., 0::2]
        return out
    if op == "cross_entropy":
        targets, sel = node.ctx
        x = ins[0]
        z = x - x.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        nll = -logp[np.arange(len(targets)), targets]
        return np.asarray(nll[sel].mean())
    raise NotImplementedError(f"float64 oracle: unhandled op {op!r}")


def eval_f64(loss: Tensor, overrides: dict[int, np.ndarray] | None = None) -> float:
    """Recompute a recorded graph in float64, optionally overriding leaf values by id."""
    overrides = overrides or {}
    vals: dict[int, np.ndarray] = {}
    for node in topo_order(loss):
        if not node.parents:
            base = overrides.get(id(node), node.data)
            vals[id(node)] = np.asarray(base, dtype=np.float64)
        else:
            vals[id(node)] = _apply_f64(node, [vals[id(p)] for p in node.parents])
    return float(np.asarray(vals[id(loss)]).reshape(()))


def fd_gradient(loss: Tensor, leaf: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of `loss` w.r.t. every entry of `leaf` (float64 oracle)."""
    base = leaf.data.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        up = eval_f64(loss, {id(leaf): bumped.reshape(base.shape)})
        bumped[i] = flat[i] - h
        down = eval_f64(loss, {id(leaf): bumped.reshape(base.shape)})
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def grad_rel_err(got: np.ndarray, want: np.ndarray, floor: float = 1e-3) -> float:
    """Worst entry error relative to the gradient's own scale (its max magnitude).

    Pointwise relative error is meaningless for near-zero entries of a float32
    gradient; normalizing by the parameter's gradient scale is the usual gradcheck
    convention and keeps a 1e-4 tolerance strict but satisfiable.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(float(np.abs(want).max(initial=0.0)), float(np.abs(got).max(initial=0.0)), floor)
    return float(np.abs(got - want).max(initial=0.0) / scale)


def build_random_graph(rng: np.random.Generator):
    """A small random network ending in cross-entropy: (loss, {name: param})."""
    from starlite import nn

    n = int(rng.integers(2, 5))
    d = int(rng.integers(3, 7))
    v = int(rng.integers(3, 7))
    params: dict[str, Tensor] = {}

    def param(name, shape, std=0.5):
        t = Tensor(rng.normal(0.0, std, shape), requires_grad=True)
        params[name] = t
        return t

    h = nn.matmul(Tensor(rng.normal(0.0, 1.0, (n, d))), param("w_in", (d, d)))
    for k in range(int(rng.integers(2, 5))):
        choice = int(rng.integers(0, 8))
        if choice == 0:
            dn = int(rng.integers(3, 7))
            h = nn.add(nn.matmul(h, param(f"w{k}", (d, dn))), param(f"b{k}", (dn,)))
            d = dn
        elif choice == 1:
            h = nn.gelu(h)
        elif choice == 2:
            h = nn.layer_norm(h, param(f"g{k}", (d,), 0.2), param(f"c{k}", (d,), 0.2))
        elif choice == 3:
            h = nn.unit_normalize(h)
        elif choice == 4:
            h = nn.mul(h, param(f"m{k}", (d,)))
        elif choice == 5 and d % 2 == 0:
            h = nn.rotate_pairs(h)
        elif choice == 6:
            h = nn.exp(nn.mul(h, 0.1))
        else:
            h = nn.add(h, nn.gelu(nn.matmul(h, param(f"r{k}", (d, d), 0.3))))
    logits = nn.matmul(h, param("w_out", (d, v)))
    targets = rng.integers(0, v, size=n)
    return nn.cross_entropy(logits, targets), params


def gradcheck_random_graphs(count: int, seed: int, h: float = 1e-3) -> float:
    """Worst relative error between autodiff and FD gradients over `count` graphs."""
    from starlite import nn

    worst = 0.0
    for g in range(count):
        rng = np.random.Generator(np.random.PCG64(seed + g))
        loss, params = build_random_graph(rng)
        nn.backward(loss)
        for name, p in params.items():
            got = p.grad if p.grad is not None else np.zeros_like(p.data)
            want = fd_gradient(loss, p, h=h)
            worst = max(worst, grad_rel_err(got, want))
    return worst
