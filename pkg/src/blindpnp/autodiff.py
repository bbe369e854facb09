"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A `Var` wraps an ndarray and records its parents plus a backward closure on a
tape. Calling `backward(out, seed)` walks the tape in reverse topological
order and accumulates `.grad` on every reachable node. The op set is exactly
what the networks and losses in this package need; everything is double
precision so analytic gradients can be checked against central finite
differences tightly.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError, NumericFailureError


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # Operator sugar; scalars and ndarrays are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __rmatmul__(self, other):
        return matmul(_lift(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))

    @property
    def T(self):
        return transpose(self)


def constant(x) -> Var:
    return Var(x, requires_grad=False)


def leaf(x, name=None) -> Var:
    return Var(x, requires_grad=True, name=name)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.value.shape))

    out.backward_fn = bw
    return out


def sub(a: Var, b: Var) -> Var:
    out = Var(a.value - b.value, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.value.shape))

    out.backward_fn = bw
    return out


def mul(a: Var, b: Var) -> Var:
    out = Var(a.value * b.value, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    out.backward_fn = bw
    return out


def div(a: Var, b: Var) -> Var:
    out = Var(a.value / b.value, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out.backward_fn = bw
    return out


def matmul(a: Var, b: Var) -> Var:
    """2-D matrix product, or matrix @ vector when b is 1-D."""
    out = Var(a.value @ b.value, parents=(a, b))
    a_is_vec = a.value.ndim == 1
    b_is_vec = b.value.ndim == 1

    def bw(g):
        if a.requires_grad:
            if b_is_vec:
                ga = np.outer(g, b.value) if not a_is_vec else g * b.value
            else:
                ga = (g[None, :] if a_is_vec else g) @ b.value.T
                if a_is_vec:
                    ga = ga[0]
            a.accumulate(ga)
        if b.requires_grad:
            if a_is_vec:
                gb = np.outer(a.value, g) if not b_is_vec else g * a.value
            else:
                gb = a.value.T @ (g[:, None] if b_is_vec else g)
                if b_is_vec:
                    gb = gb[:, 0]
            b.accumulate(gb)

    out.backward_fn = bw
    return out


def transpose(a: Var) -> Var:
    out = Var(a.value.T, parents=(a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g.T)

    out.backward_fn = bw
    return out


def reshape(a: Var, shape) -> Var:
    out = Var(a.value.reshape(shape), parents=(a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.value.shape))

    out.backward_fn = bw
    return out


def exp(a: Var) -> Var:
    val = np.exp(a.value)
    out = Var(val, parents=(a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * val)

    out.backward_fn = bw
    return out


def log(a: Var) -> Var:
    out = Var(np.log(a.value), parents=(a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g / a.value)

    out.backward_fn = bw
    return out


def sqrt(a: Var) -> Var:
    val = np.sqrt(a.value)
    out = Var(val, parents=(a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * 0.5 / val)

    out.backward_fn = bw
    return out


def tanh(a: Var) -> Var:
    val = np.tanh(a.value)
    out = Var(val, parents=(a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - val * val))

    out.backward_fn = bw
    return out


def relu(a: Var) -> Var:
    mask = a.value > 0
    out = Var(np.where(mask, a.value, 0.0), parents=(a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * mask)

    out.backward_fn = bw
    return out


def softplus(a: Var) -> Var:
    """log(1 + exp(x)) computed stably; gradient is the logistic sigmoid."""
    x = a.value
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = Var(val, parents=(a,))

    def bw(g):
        if a.requires_grad:
            sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
            a.accumulate(g * sig)

    out.backward_fn = bw
    return out


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    out = Var(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bw(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.value.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(gg, a.value.shape))

    out.backward_fn = bw
    return out


def vmean(a: Var, axis=None, keepdims=False) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    """a[idx] for an integer index array; backward scatter-adds into the rows."""
    idx = np.asarray(idx)
    out = Var(a.value[idx], parents=(a,))

    def bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.value)
            np.add.at(ga, idx.ravel(), g.reshape(-1, *a.value.shape[1:]))
            a.accumulate(ga)

    out.backward_fn = bw
    return out


def concat_cols(parts) -> Var:
    """Concatenate 2-D vars along axis 1."""
    parts = [_lift(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=1), parents=tuple(parts))
    widths = [p.value.shape[1] for p in parts]

    def bw(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate(g[:, off : off + w])
            off += w

    out.backward_fn = bw
    return out


def smallest_eigvec(s: Var, gap_floor: float = 0.0) -> Var:
    """Unit eigenvector for the smallest eigenvalue of a symmetric matrix.

    The sign is fixed so the largest-magnitude component is positive. Backward
    uses the eigenvector perturbation series over the remaining eigenpairs;
    a spectral gap below `gap_floor` raises NumericFailureError.
    """
    sym = 0.5 * (s.value + s.value.T)
    evals, evecs = np.linalg.eigh(sym)
    gap = evals[1] - evals[0]
    if gap <= gap_floor:
        raise NumericFailureError(f"spectral gap {gap:.3e} below {gap_floor:.3e}")
    v = evecs[:, 0]
    pivot = np.argmax(np.abs(v))
    if v[pivot] < 0:
        v = -v
        evecs = evecs.copy()
        evecs[:, 0] = v
    out = Var(v, parents=(s,))

    def bw(g):
        if s.requires_grad:
            coeff = evecs[:, 1:].T @ g / (evals[0] - evals[1:])
            gs = (evecs[:, 1:] @ coeff)[:, None] * v[None, :]
            s.accumulate(0.5 * (gs + gs.T))

    out.backward_fn = bw
    return out


def l2_normalize_rows(a: Var, eps: float = 0.0) -> Var:
    """Row-wise unit normalization; the exact projection Jacobian falls out
    of the primitive composition."""
    sq = vsum(mul(a, a), axis=1, keepdims=True)
    return div(a, sqrt(add(sq, constant(eps))))


def _topo_order(root: Var):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(out: Var, seed=None) -> None:
    """Accumulate gradients of `out` (seeded with `seed`) into every leaf."""
    if not out.requires_grad:
        raise ContractViolationError("output does not depend on any trainable leaf")
    if seed is None:
        if out.value.shape != ():
            raise ContractViolationError("non-scalar output requires an explicit seed")
        seed = np.asarray(1.0)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out.value.shape:
        raise ContractViolationError(
            f"seed shape {seed.shape} does not match output shape {out.value.shape}"
        )
    order = _topo_order(out)
    out.accumulate(seed)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def finite_difference_gradient(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one ndarray."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g
