"""Reverse-mode autodiff over float64 numpy arrays with a closed op set.

Differentiable programs are built by composing the operations exported
here on ``Var`` nodes: affine maps (``matmul``/``add``/``mul``), softmax,
log-sum-exp, ReLU and the other pointwise nonlinearities, reductions
(``vsum``/``vmean``/``vmax``), and constant-index data movement
(``reshape``/``transpose``/``concat``/``take``/``scatter_rows``).
Gradients are exact for any composition of these, up to floating point.

There is deliberately no tape over arbitrary user code: anything outside
the op set (e.g. a raw numpy ufunc applied to a ``Var``) is rejected by
name, which keeps every adjoint small enough to hand-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Var",
    "UnsupportedOperationError",
    "NonScalarOutputError",
    "GradReport",
    "as_var",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "absval",
    "vexp",
    "vlog",
    "vsqrt",
    "vsum",
    "vmean",
    "vmax",
    "softmax",
    "logsumexp",
    "reshape",
    "transpose",
    "concat",
    "stack_rows",
    "take",
    "scatter_rows",
    "layer_norm",
    "l2_normalize",
    "cosine",
    "backward",
    "evaluate",
    "value_and_grad",
    "check_gradient",
]


class UnsupportedOperationError(TypeError):
    """An operation outside the supported differentiable set was applied."""


class NonScalarOutputError(ValueError):
    """A differentiable program returned a non-scalar output."""


class Var:
    """Node in the computation graph, wrapping a float64 ndarray.

    Leaves are created with ``Var(value)`` / ``constant``; interior nodes
    carry their parents and one vector-Jacobian callback per parent.
    """

    __slots__ = ("value", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # Anything numpy would try to do to a Var directly is outside the op set.
    def __array_ufunc__(self, ufunc, method, *args, **kwargs):
        raise UnsupportedOperationError(
            f"operation '{ufunc.__name__}' is not in the supported op set"
        )

    def __array__(self, dtype=None, copy=None):
        raise UnsupportedOperationError(
            "implicit conversion of Var to ndarray; use .value"
        )

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x) -> Var:
    """Wrap a value as a leaf that never receives a gradient."""
    return Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an upstream gradient down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value + b.value
    return Var(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value - b.value
    return Var(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value * b.value
    return Var(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value / b.value
    return Var(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.value, (a,), (lambda g: -g,))


def matmul(a, b) -> Var:
    """Matrix product; operands must be >= 2-D (batched 3-D supported)."""
    a, b = as_var(a), as_var(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise UnsupportedOperationError("matmul requires operands with ndim >= 2")
    out = a.value @ b.value

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)

    return Var(out, (a, b), (vjp_a, vjp_b))


def relu(a) -> Var:
    a = as_var(a)
    keep = a.value > 0.0
    return Var(np.where(keep, a.value, 0.0), (a,), (lambda g: g * keep,))


def absval(a) -> Var:
    a = as_var(a)
    return Var(np.abs(a.value), (a,), (lambda g: g * np.sign(a.value),))


def vexp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, (a,), (lambda g: g * out,))


def vlog(a) -> Var:
    a = as_var(a)
    return Var(np.log(a.value), (a,), (lambda g: g / a.value,))


def vsqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return Var(out, (a,), (lambda g: g * 0.5 / out,))


def _restore_axes(g, axis, keepdims, out_shape):
    if axis is None:
        return g
    if not keepdims:
        g = np.expand_dims(g, axis)
    return g


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, shape).astype(np.float64, copy=True)
        return np.broadcast_to(_restore_axes(g, axis, keepdims, shape), shape).copy()

    return Var(out, (a,), (vjp,))


def vmean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    shape = a.value.shape
    n = a.value.size if axis is None else shape[axis]
    s = vsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def vmax(a, axis=None, keepdims=False) -> Var:
    """Maximum reduction; gradient routes to the first argmax (ties broken low)."""
    a = as_var(a)
    out = a.value.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        mask = np.zeros_like(a.value)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.value), a.value.shape)
            mask[idx] = 1.0
            return mask * g
        idx = np.argmax(a.value, axis=axis)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        return mask * _restore_axes(g, axis, keepdims, a.value.shape)

    return Var(out, (a,), (vjp,))


def softmax(a, axis=-1) -> Var:
    a = as_var(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (g - (g * s).sum(axis=axis, keepdims=True)) * s

    return Var(s, (a,), (vjp,))


def logsumexp(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    if not keepdims:
        out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    soft = e / s

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is None:
            return np.broadcast_to(g, a.value.shape) * soft
        return _restore_axes(g, axis, keepdims, a.value.shape) * soft

    return Var(out, (a,), (vjp,))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def transpose(a, axes) -> Var:
    a = as_var(a)
    inv = np.argsort(axes)
    return Var(a.value.transpose(axes), (a,), (lambda g: g.transpose(inv),))


def concat(parts: Sequence, axis=0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=axis)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Var(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def stack_rows(parts: Sequence) -> Var:
    """Stack same-shaped items along a new leading axis."""
    parts = [as_var(p) for p in parts]
    return concat([reshape(p, (1,) + p.value.shape) for p in parts], axis=0)


def take(a, indices, axis=0) -> Var:
    """Select along an axis with a constant integer index array."""
    a = as_var(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.value, idx, axis=axis)

    def vjp(g):
        z = np.zeros_like(a.value)
        moved = np.moveaxis(z, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return z

    return Var(out, (a,), (vjp,))


def scatter_rows(src, index, num_rows: int) -> Var:
    """Place rows of ``src`` into a zero array of ``num_rows`` rows.

    ``index`` must contain unique row positions (each destination written
    at most once); the adjoint is a plain gather.
    """
    src = as_var(src)
    idx = np.asarray(index, dtype=np.intp)
    out = np.zeros((num_rows,) + src.value.shape[1:], dtype=np.float64)
    out[idx] = src.value
    return Var(out, (src,), (lambda g: g[idx],))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Var:
    """Row-wise layer normalization composed from primitives."""
    x = as_var(x)
    mu = vmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = vmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, vsqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def l2_normalize(v) -> Var:
    v = as_var(v)
    return div(v, vsqrt(vsum(mul(v, v))))


def cosine(a, b) -> Var:
    """Cosine similarity of two same-shape vectors; undefined at zero norm."""
    a, b = as_var(a), as_var(b)
    num = vsum(mul(a, b))
    return div(num, mul(vsqrt(vsum(mul(a, a))), vsqrt(vsum(mul(b, b)))))


def _toposort(root: Var) -> list:
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, targets: Iterable[Var]) -> dict:
    """Gradients of scalar ``root`` w.r.t. ``targets``, keyed by id.

    Sub-graphs that cannot reach a target are skipped entirely, so mixing
    large constant graphs (e.g. a clean forward pass) into a loss costs
    nothing at backward time.
    """
    target_ids = {id(t) for t in targets}
    order = _toposort(root)
    needed = set()
    for node in order:  # parents precede children in post-order
        if id(node) in target_ids or any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or id(node) not in needed:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if id(parent) not in needed:
                continue
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return {i: grads[i] for i in target_ids if i in grads}


Program = Callable[[Mapping[str, Var]], Var]


def evaluate(program: Program, inputs: Mapping[str, np.ndarray]) -> float:
    """Run a program on constant leaves and return its scalar value."""
    out = program({name: Var(v) for name, v in inputs.items()})
    if isinstance(out, Var):
        if out.value.size != 1:
            raise NonScalarOutputError(f"program output has shape {out.value.shape}")
        return float(out.value)
    return float(out)


def value_and_grad(program: Program, inputs: Mapping[str, np.ndarray], wrt):
    """Evaluate a scalar program and differentiate it w.r.t. named inputs.

    Returns ``(value, grads)`` where ``grads[name]`` has the shape of
    ``inputs[name]``. Inputs the output does not depend on get zeros.
    """
    wrt = set(wrt)
    unknown = wrt - set(inputs)
    if unknown:
        raise ValueError(f"wrt names not among inputs: {sorted(unknown)}")
    leaves = {name: Var(v) for name, v in inputs.items()}
    out = program(leaves)
    if not isinstance(out, Var):
        value = float(out)
        return value, {n: np.zeros_like(leaves[n].value) for n in wrt}
    if out.value.size != 1:
        raise NonScalarOutputError(f"program output has shape {out.value.shape}")
    grads = backward(out, [leaves[n] for n in wrt])
    return float(out.value), {
        n: grads.get(id(leaves[n]), np.zeros_like(leaves[n].value)) for n in wrt
    }


@dataclass
class GradReport:
    """Analytic vs central-difference gradients and their worst relative error.

    For a single ``wrt`` name the arrays keep that input's shape; for
    several names they are flat concatenations in sorted-name order.
    """

    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float


def check_gradient(program: Program, inputs: Mapping[str, np.ndarray], wrt, step: float = 1e-5) -> GradReport:
    """Compare analytic gradients against central finite differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    wrt = sorted(set(wrt))
    _, analytic = value_and_grad(program, inputs, wrt)
    base = {name: np.array(v, dtype=np.float64) for name, v in inputs.items()}
    numeric = {}
    for name in wrt:
        x = base[name]
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate(program, base)
            flat[i] = orig - step
            lo = evaluate(program, base)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        numeric[name] = g
    if len(wrt) == 1:
        a, n = analytic[wrt[0]], numeric[wrt[0]]
    else:
        a = np.concatenate([analytic[k].reshape(-1) for k in wrt])
        n = np.concatenate([numeric[k].reshape(-1) for k in wrt])
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    err = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return GradReport(analytic=a, numeric=n, max_rel_err=err)
