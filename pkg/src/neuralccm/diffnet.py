"""A shallow reverse-mode tape over numpy arrays, two-layer perceptrons, Adam.

The networks in this package are all ``out = W2 tanh(W1 x + b1) + b2``.
Their input Jacobians are written out in closed form and built from the
same recorded operations as everything else, so a loss that contains
``du/dx`` (the feedback gain) can still be differentiated with respect to
the parameters using first-order reverse mode only.

Every value carries an optional leading batch dimension.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True


class UnsupportedOpError(TypeError):
    """An operation was applied to a Tensor that the tape cannot record."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))


class Tensor:
    __array_ufunc__ = None  # make numpy defer to (and fail on) Tensor operands

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    def __array__(self, *args, **kwargs):
        raise UnsupportedOpError(
            "numpy function applied to a Tensor; use the tape operations instead")

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # graph construction -------------------------------------------------
    @staticmethod
    def _make(value, parents, backward):
        parents = tuple(parents)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Tensor(value, parents, backward, requires_grad=True)
        return Tensor(value)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                cur, done = stack.pop()
                if done:
                    order.append(cur)
                    continue
                if id(cur) in seen:
                    continue
                seen.add(id(cur))
                stack.append((cur, True))
                for p in cur._parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise UnsupportedOpError("graph node has parents but no recorded derivative")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.value + other.value, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.value - other.value, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedOpError("division by a Tensor is not recorded")
        return self * (1.0 / np.asarray(other, dtype=float))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        if a.ndim < 2 or b.ndim < 2:
            raise UnsupportedOpError("matmul needs operands with at least 2 dims")

        def back(g):
            return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g

        return Tensor._make(a @ b, (self, other), back)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # shape ops -----------------------------------------------------------
    @property
    def T(self):
        return self.swap()

    def swap(self):
        """Transpose of the last two axes."""
        return Tensor._make(np.swapaxes(self.value, -1, -2), (self,),
                            lambda g: (np.swapaxes(g, -1, -2),))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.value.shape
        return Tensor._make(self.value.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def __getitem__(self, idx):
        old = self.value.shape

        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

        def back(g):
            full = np.zeros(old)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.value[idx], (self,), back)

    # reductions ----------------------------------------------------------
    def sum(self, axis=None):
        old = self.value.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, old).copy(),)
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % len(old) for a in axes)
            return (np.broadcast_to(np.expand_dims(g, axes), old).copy(),)

        return Tensor._make(self.value.sum(axis=axis), (self,), back)

    def mean(self, axis=None):
        count = self.value.size if axis is None else np.prod(
            [self.value.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis) * (1.0 / count)

    # elementwise nonlinearities -------------------------------------------
    def tanh(self):
        out = np.tanh(self.value)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = self.value > 0
        return Tensor._make(np.where(mask, self.value, 0.0), (self,), lambda g: (g * mask,))

    def square(self):
        return self * self


def einsum(subscripts, *operands):
    """Recorded ``np.einsum`` with explicit (non-ellipsis) subscripts."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_subs = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError("subscript count does not match operand count")
    for s in in_subs:
        if len(set(s)) != len(s) or "." in s:
            raise UnsupportedOpError(f"unsupported einsum operand subscripts {s!r}")
    vals = [o.value for o in ops]
    out = np.einsum(subscripts, *vals, optimize=True)

    def back(g):
        grads = []
        for i, (s, o) in enumerate(zip(in_subs, ops)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [out_subs] + [in_subs[j] for j in range(len(ops)) if j != i]
            avail = set("".join(others))
            keep = "".join(c for c in s if c in avail)
            terms = [g] + [vals[j] for j in range(len(ops)) if j != i]
            gi = np.einsum(",".join(others) + "->" + keep, *terms, optimize=True)
            if keep != s:
                shape = [o.value.shape[k] if c in avail else 1 for k, c in enumerate(s)]
                gi = np.broadcast_to(gi.reshape(shape), o.value.shape).copy()
            grads.append(gi)
        return grads

    return Tensor._make(out, ops, back)


def concat(tensors, axis):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return np.split(g, cuts, axis=axis)

    return Tensor._make(np.concatenate([t.value for t in ts], axis=axis), ts, back)


def inv(x):
    """Batched matrix inverse; ``d(A^-1) = -A^-1 dA A^-1``."""
    from .linalg import inverse
    x = as_tensor(x)
    out = inverse(x.value)
    outT = np.swapaxes(out, -1, -2)

    def back(g):
        return [-(outT @ g @ outT)]

    return Tensor._make(out, [x], back)


def fro_norm(x):
    """Frobenius norm over the last two axes; subgradient 0 at the origin."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.value ** 2, axis=(-2, -1)))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (x.value * scale[..., None, None],)

    return Tensor._make(n, (x,), back)


def eye_like(n, batch_shape=()):
    return np.broadcast_to(np.eye(n), tuple(batch_shape) + (n, n))


# -----------------------------------------------------------------------------
# Two-layer perceptron
# -----------------------------------------------------------------------------

class Mlp2:
    """``out = W2 tanh(W1 x + b1) + b2`` with parameters held as leaf Tensors."""

    activation = "tanh"

    def __init__(self, in_dim, out_dim, hidden_dim=128, rng=None, zero=False):
        self.in_dim, self.out_dim, self.hidden_dim = int(in_dim), int(out_dim), int(hidden_dim)
        shapes = [(self.hidden_dim, self.in_dim), (self.hidden_dim,),
                  (self.out_dim, self.hidden_dim), (self.out_dim,)]
        if zero:
            arrays = [np.zeros(s) for s in shapes]
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            arrays = []
            for s, fan_in in zip(shapes, [self.in_dim, self.in_dim, self.hidden_dim, self.hidden_dim]):
                bound = 1.0 / np.sqrt(max(fan_in, 1))
                arrays.append(rng.uniform(-bound, bound, size=s))
        self.W1, self.b1, self.W2, self.b2 = (Tensor(a, requires_grad=True) for a in arrays)

    @property
    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def _check(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input of length {self.in_dim}, got {x.shape[-1]}")

    # plain numpy path --------------------------------------------------------
    def forward(self, x):
        x = np.asarray(x, dtype=float)
        self._check(x)
        h = np.tanh(x @ self.W1.value.T + self.b1.value)
        return h @ self.W2.value.T + self.b2.value

    __call__ = forward

    def input_jacobian(self, x):
        """``W2 diag(1 - tanh^2(W1 x + b1)) W1``, shape ``(..., out, in)``."""
        x = np.asarray(x, dtype=float)
        self._check(x)
        h = np.tanh(x @ self.W1.value.T + self.b1.value)
        ds = 1.0 - h * h
        return (self.W2.value * ds[..., None, :]) @ self.W1.value

    # recorded path -----------------------------------------------------------
    def hidden(self, x):
        """Hidden activation and its slope ``tanh'`` as recorded Tensors."""
        x = as_tensor(x)
        self._check(x.value)
        h = (x @ self.W1.T + self.b1).tanh()
        return h, 1.0 - h * h

    def apply(self, x):
        h, _ = self.hidden(x)
        return h @ self.W2.T + self.b2

    def jvp(self, slope, v):
        """Directional derivative ``J(x) v`` given the slope from ``hidden``."""
        return (slope * (as_tensor(v) @ self.W1.T)) @ self.W2.T

    # serialization -----------------------------------------------------------
    def to_dict(self):
        return {
            "in_dim": self.in_dim, "hidden_dim": self.hidden_dim, "out_dim": self.out_dim,
            "activation": self.activation,
            "W1": self.W1.value.ravel().tolist(), "b1": self.b1.value.tolist(),
            "W2": self.W2.value.ravel().tolist(), "b2": self.b2.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("activation", "tanh") != "tanh":
            raise ValueError(f"unsupported activation {d['activation']!r}")
        net = cls(d["in_dim"], d["out_dim"], d["hidden_dim"], zero=True)
        net.W1.value = np.array(d["W1"], dtype=float).reshape(net.hidden_dim, net.in_dim)
        net.b1.value = np.array(d["b1"], dtype=float).reshape(net.hidden_dim)
        net.W2.value = np.array(d["W2"], dtype=float).reshape(net.out_dim, net.hidden_dim)
        net.b2.value = np.array(d["b2"], dtype=float).reshape(net.out_dim)
        return net


def contract_jacobian(net, slope, rows, cols, v, in_cols=None):
    """``T[b, r, j] = sum_s d out[b, r, s] / d in[b, j] * v[b, s]``.

    ``out`` is the network output viewed as ``(rows, cols)``. ``in_cols``
    restricts ``j`` to a subset of input columns. Built from recorded ops so
    it stays differentiable in the parameters.
    """
    w2 = net.W2.reshape(rows, cols, net.hidden_dim)
    p = einsum("rsh,bs->brh", w2, v)
    w1 = net.W1 if in_cols is None else net.W1[:, in_cols]
    return einsum("brh,bh,hj->brj", p, slope, w1)


# -----------------------------------------------------------------------------
# Adam
# -----------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state, params, grads):
    """Bias-corrected Adam update, in place on ``params`` (list of arrays)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
