"""Control-affine benchmark systems ``xdot = f(x) + B(x) u``.

Each benchmark is written once as a sympy right-hand side ``rhs(x, u)``.
``f`` and ``B`` are read off as ``rhs(x, 0)`` and ``d rhs / du`` (the input
enters linearly, which is checked), and the state Jacobians ``df/dx`` and
``db_j/dx`` are differentiated symbolically and compiled to vectorised
numpy callables. The neural lander adds a numeric residual force on top.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import sympy as sp

from . import linalg
from .diffnet import Mlp2

PI = np.pi


class NumericDomainError(ArithmeticError):
    """Dynamics evaluated to a non-finite value."""


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("box bounds differ in length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.size

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidth(self):
        return 0.5 * (self.upper - self.lower)

    def scaled(self, factor):
        """Box with the same center and ``factor`` times the width."""
        c, h = self.center, self.halfwidth
        return Box(c - factor * h, c + factor * h)

    def contains(self, x, atol=0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - atol) & (x <= self.upper + atol), axis=-1)

    def sample(self, rng, count):
        return self.lower + (self.upper - self.lower) * rng.random((count, self.dim))

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


def sample_uniform(box, count, seed):
    """``count`` i.i.d. uniform draws from ``box``; reproducible per seed."""
    return box.sample(np.random.default_rng(seed), count)


@dataclass
class ResidualHook:
    """Learned-force residual ``Fa(z, vx, vy, vz)`` of the neural lander.

    ``net`` maps the four inputs to three raw outputs; they are squashed
    smoothly into ``[-cap, cap]`` so the gradient stays defined.
    """

    net: Mlp2
    cap: float = 3.0
    inputs: tuple = (2, 3, 4, 5)

    def __call__(self, x):
        raw = self.net.forward(x[..., list(self.inputs)])
        return self.cap * np.tanh(raw / self.cap)

    def jacobian(self, x):
        z = x[..., list(self.inputs)]
        raw = self.net.forward(z)
        slope = 1.0 - np.tanh(raw / self.cap) ** 2
        return slope[..., :, None] * self.net.input_jacobian(z)


@dataclass
class DynamicsEval:
    f: np.ndarray
    B: np.ndarray
    dfdx: np.ndarray
    dbdx: np.ndarray  # (..., m, n, n): entry j is d b_j / dx
    xdot: np.ndarray


@dataclass
class SystemModel:
    name: str
    n: int
    m: int
    state_box: Box
    control_box: Box
    init_box: Box
    init_error_box: Box
    sparse: bool
    rate: float = 0.5
    horizon: float = 6.0
    invariant: tuple = ()
    _f: Callable = field(default=None, repr=False)
    _B: Callable = field(default=None, repr=False)
    _dfdx: Callable = field(default=None, repr=False)
    _dbdx: Callable = field(default=None, repr=False)
    residual: ResidualHook | None = field(default=None, repr=False)
    residual_mass: float = 1.0

    @property
    def annihilator_policy(self):
        return "analytic-sparse" if self.sparse else "numeric"

    @property
    def relevant(self):
        """State coordinates that the dynamics actually depend on."""
        return tuple(i for i in range(self.n) if i not in self.invariant)

    def f(self, x):
        x = np.asarray(x, dtype=float)
        out = self._f(x)
        if self.residual is not None:
            out = out.copy()
            out[..., 3:6] += self.residual(x) / self.residual_mass
        return out

    def B(self, x):
        return self._B(np.asarray(x, dtype=float))

    def dfdx(self, x):
        x = np.asarray(x, dtype=float)
        out = self._dfdx(x)
        if self.residual is not None:
            out = out.copy()
            cols = list(self.residual.inputs)
            out[..., 3:6, cols] += self.residual.jacobian(x) / self.residual_mass
        return out

    def dbdx(self, x):
        return self._dbdx(np.asarray(x, dtype=float))


def eval_dynamics(model, x, u):
    """Evaluate every analytic piece of the model at ``x`` (batched)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f, B = model.f(x), model.B(x)
    out = DynamicsEval(f=f, B=B, dfdx=model.dfdx(x), dbdx=model.dbdx(x),
                       xdot=f + np.einsum("...ij,...j->...i", B, u))
    for name in ("f", "B", "dfdx", "dbdx", "xdot"):
        if not np.all(np.isfinite(getattr(out, name))):
            raise NumericDomainError(f"non-finite {name} at x={x}")
    return out


def annihilator(model, x):
    """``B_perp(x)`` with ``B_perp^T B = 0``; shape ``(..., n, n - m)``."""
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    k = model.n - model.m
    if model.sparse:
        const = np.zeros((model.n, k))
        const[:k, :k] = np.eye(k)
        return np.broadcast_to(const, lead + (model.n, k))
    return linalg.null_space_basis(model.B(x))


# -----------------------------------------------------------------------------
# symbolic compilation
# -----------------------------------------------------------------------------

def _compile(exprs, xs, shape):
    """Vectorised evaluator of a sympy array, returning ``(..., *shape)``."""
    flat = list(sp.flatten(exprs))
    nz = [(i, e) for i, e in enumerate(flat) if e != 0]
    size = int(np.prod(shape))
    if not nz:
        def zero(x):
            return np.zeros(x.shape[:-1] + tuple(shape))
        return zero
    fn = sp.lambdify(xs, [e for _, e in nz], modules="numpy")
    idx = np.array([i for i, _ in nz])

    def evaluate(x):
        lead = x.shape[:-1]
        vals = fn(*[x[..., i] for i in range(x.shape[-1])])
        out = np.zeros(lead + (size,))
        for k, v in zip(idx, vals):
            out[..., k] = v
        return out.reshape(lead + tuple(shape))

    return evaluate


def _split_affine(rhs, xs, us):
    rhs = sp.Matrix(rhs)
    zero = {u: 0 for u in us}
    f = sp.simplify(rhs.subs(zero))
    B = rhs.jacobian(us)
    if any(sp.simplify(sp.diff(e, u)) != 0 for e in B for u in us):
        raise ValueError("dynamics are not affine in the input")
    B = sp.simplify(B.subs(zero))
    return f, B


@lru_cache(maxsize=None)
def _compiled(name):
    xs, us, rhs = _RHS[name]()
    f, B = _split_affine(rhs, xs, us)
    n, m = len(xs), len(us)
    dfdx = f.jacobian(xs)
    dbdx = [B[:, j].jacobian(xs) for j in range(m)]
    return (_compile(f, xs, (n,)), _compile(B, xs, (n, m)), _compile(dfdx, xs, (n, n)),
            _compile(sp.Array([list(d) for d in dbdx]).reshape(m, n, n).tolist(), xs, (m, n, n)),
            (f, B))


def symbolic_form(name):
    """The sympy ``(f, B)`` pair of a benchmark."""
    return _compiled(name)[4]


# -----------------------------------------------------------------------------
# benchmark right-hand sides
# -----------------------------------------------------------------------------

def _syms(n, m):
    return sp.symbols(f"x0:{n}", real=True), sp.symbols(f"u0:{m}", real=True)


def _dubins():
    (px, py, th, v), (w, a) = xs, us = _syms(4, 2)
    return xs, us, [v * sp.cos(th), v * sp.sin(th), w, a]


PVTOL_MASS, PVTOL_J, PVTOL_G, PVTOL_L = 0.486, 0.00383, 9.81, 0.25


def _pvtol():
    xs, us = _syms(6, 2)
    px, pz, phi, vx, vz, dphi = xs
    u1, u2 = us
    m, J, g, l = sp.Float(PVTOL_MASS), sp.Float(PVTOL_J), sp.Float(PVTOL_G), sp.Float(PVTOL_L)
    return xs, us, [
        vx * sp.cos(phi) - vz * sp.sin(phi),
        vx * sp.sin(phi) + vz * sp.cos(phi),
        dphi,
        vz * dphi - g * sp.sin(phi),
        -vx * dphi - g * sp.cos(phi) + (u1 + u2) / m,
        (u1 - u2) * l / J,
    ]


def _quadrotor():
    xs, us = _syms(10, 4)
    px, py, pz, vx, vy, vz, f, phi, th, psi = xs
    g = sp.Float(9.81)
    return xs, us, [
        vx, vy, vz,
        -f * sp.sin(th),
        f * sp.cos(th) * sp.sin(phi),
        g - f * sp.cos(th) * sp.cos(phi),
        us[0], us[1], us[2], us[3],
    ]


LANDER_MASS = 1.47
LANDER_LIFT_BIAS = 2.0


def _neural_lander():
    xs, us = _syms(6, 3)
    px, py, pz, vx, vy, vz = xs
    g = sp.Float(9.81)
    # the learned force Fa/m is added numerically by ResidualHook
    return xs, us, [vx, vy, vz, us[0], us[1], us[2] - g]


def _segway():
    xs, us = _syms(4, 1)
    p, th, v, om = xs
    u = us[0]
    c, s = sp.cos(th), sp.sin(th)
    F = sp.Float
    return xs, us, [
        v,
        om,
        (c * (F(9.8) * s - F(1.8) * u + F(11.5) * v) - F(10.9) * u + F(68.4) * v
         - F(1.2) * om ** 2 * s) / (c - F(24.7)),
        ((F(9.3) * u - F(58.8) * v) * c + F(38.6) * u - F(243.5) * v
         - s * (F(208.3) + om ** 2 * c)) / (c ** 2 - F(24.7)),
    ]


def _cartpole():
    xs, us = _syms(4, 1)
    p, th, v, om = xs
    u = us[0]
    mc, mp, g, l = sp.Integer(1), sp.Integer(1), sp.Float(9.8), sp.Integer(1)
    c, s = sp.cos(th), sp.sin(th)
    den = mc + mp * s ** 2
    return xs, us, [
        v,
        om,
        (u + mp * s * (l * om ** 2 - g * c)) / den,
        (u * c + mp * l * om ** 2 * c * s - (mc + mp) * g * s) / (l * den),
    ]


def _pendulum():
    xs, us = _syms(2, 1)
    th, dth = xs
    g, m, l = sp.Float(9.81), sp.Float(0.15), sp.Float(0.5)
    return xs, us, [dth, (m * g * l * sp.sin(th) - sp.Float(0.1) * dth + us[0]) / (m * l ** 2)]


def _quadrotor2():
    xs, us = _syms(10, 3)
    px, py, pz, vx, vy, thx, thy, wx, wy, vz = xs
    ax, ay, az = us
    d0, d1, n0, kT, g = sp.Integer(10), sp.Integer(8), sp.Integer(10), sp.Float(0.91), sp.Float(9.81)
    return xs, us, [
        vx, vy, vz,
        g * sp.tan(thx),
        g * sp.tan(thy),
        -d1 * thx + wx,
        -d1 * thy + wy,
        -d0 * thx + n0 * ax,
        -d0 * thy + n0 * ay,
        kT * az - g,
    ]


def _tlpra():
    xs, us = _syms(4, 2)
    q1, q2, dq1, dq2 = xs
    t1, t2 = us
    m1, m2, a1, a2, g = sp.Float(0.8), sp.Float(2.3), sp.Integer(1), sp.Integer(1), sp.Float(9.8)
    alpha = (m1 + m2) * a1 ** 2
    beta = m2 * a2 ** 2
    eta = m2 * a1 * a2
    e1 = g / a1
    H = sp.Matrix([[alpha + beta + 2 * eta * sp.cos(q2), beta + eta * sp.cos(q2)],
                   [beta + eta * sp.cos(q2), beta]])
    rhs = sp.Matrix([
        t1 + eta * (2 * dq1 * dq2 + dq2 ** 2) * sp.sin(q2) - alpha * e1 * sp.cos(q1)
        - eta * e1 * sp.cos(q1 + q2),
        t2 - eta * dq1 ** 2 * sp.sin(q2) - eta * e1 * sp.cos(q1 + q2),
    ])
    acc = H.inv() * rhs
    return xs, us, [dq1, dq2, acc[0], acc[1]]


def _scalar():
    xs, us = _syms(1, 1)
    return xs, us, [-xs[0] + us[0]]


def _damped2():
    xs, us = _syms(2, 1)
    return xs, us, [-xs[0], -xs[1] + us[0]]


def _double_integrator():
    xs, us = _syms(2, 1)
    return xs, us, [xs[1], us[0]]


_RHS = {
    "dubins": _dubins, "pvtol": _pvtol, "quadrotor": _quadrotor,
    "neural_lander": _neural_lander, "segway": _segway, "cartpole": _cartpole,
    "pendulum": _pendulum, "quadrotor2": _quadrotor2, "tlpra": _tlpra,
    "scalar": _scalar, "damped2": _damped2, "double_integrator": _double_integrator,
}

G = 9.81
P3 = PI / 3

# name: (X, U, X0, Xe0, sparse, rate, horizon, invariant coordinates)
BENCHMARK_TABLE = {
    "dubins": (
        ([-5, -5, -PI, 1], [5, 5, PI, 2]),
        ([-1, 0], [1, 0]),
        ([-2, -2, -1, 1.5], [2, 2, 1, 1.5]),
        ([-1, -1, -1, -1], [1, 1, 1, 1]),
        True, 1.0, 10.0, (0, 1)),
    "pvtol": (
        ([-35, -2, -P3, -2, -1, -P3], [0, 2, P3, 2, 1, P3]),
        ([PVTOL_MASS * G / 2 - 1] * 2, [PVTOL_MASS * G / 2 + 1] * 2),
        ([0, 0, -0.1, 0.5, 0, 0], [0, 0, 0.1, 1, 0, 0]),
        ([-0.5] * 6, [0.5] * 6),
        True, 0.5, 6.0, (0, 1)),
    "quadrotor": (
        ([-30, -30, -30, -1.5, -1.5, -1.5, 0.5 * G, -P3, -P3, -P3],
         [30, 30, 30, 1.5, 1.5, 1.5, 2 * G, P3, P3, P3]),
        ([-1] * 4, [1] * 4),
        ([-5, -5, -5, -1, -1, -1, G, 0, 0, 0], [5, 5, 5, 1, 1, 1, G, 0, 0, 0]),
        ([-0.5] * 10, [0.5] * 10),
        True, 0.5, 6.0, (0, 1, 2)),
    "neural_lander": (
        ([-5, -5, 0, -1, -1, -1], [5, 5, 2, 1, 1, 1]),
        ([-1, -1, -3], [1, 1, 9]),
        ([-3, -3, 0.5, 1, 0, 0], [3, 3, 1, 1, 0, 0]),
        ([-1, -1, -0.4, -1, -1, 0], [1, 1, 1, 1, 1, 0]),
        True, 0.5, 6.0, (0, 1)),
    "segway": (
        ([-5, -P3, -1, -PI], [5, P3, 1, PI]),
        ([0], [0]),
        ([0, 0, 0, 0], [0, 0, 0, 0]),
        ([-1, -P3, -0.5, -PI], [1, P3, 0.5, PI]),
        False, 0.5, 6.0, (0,)),
    "cartpole": (
        ([-5, -P3, -1, -1], [5, P3, 1, 1]),
        ([0], [0]),
        ([0, 0, 0, 0], [0, 0, 0, 0]),
        ([-0.3] * 4, [0.3] * 4),
        False, 0.5, 10.0, (0,)),
    "pendulum": (
        ([-P3, -P3], [P3, P3]),
        ([-1], [1]),
        ([0, 0], [0, 0]),
        ([-PI / 4, -PI / 4], [PI / 4, PI / 4]),
        True, 3.0, 10.0, ()),
    "quadrotor2": (
        ([-15, -15, -15, -2, -2, -P3, -P3, -P3, -P3, -2],
         [15, 15, 15, 2, 2, P3, P3, P3, P3, 2]),
        ([-10, -10, 0], [10, 10, 1.5 * G]),
        ([-2, -2, -2, -1, -1, -0.5, -0.5, -0.5, -0.5, -1],
         [2, 2, 2, 1, 1, 0.5, 0.5, 0.5, 0.5, 1]),
        ([-0.5] * 10, [0.5] * 10),
        True, 0.5, 6.0, (0, 1, 2)),
    "tlpra": (
        ([-PI / 2, -PI / 2, -P3, -P3], [PI / 2, PI / 2, P3, P3]),
        ([0, 0], [0, 0]),
        ([PI / 2, 0, 0, 0], [PI / 2, 0, 0, 0]),
        ([-0.3, -0.3, 0, 0], [0.3, 0.3, 0, 0]),
        True, 2.0, 6.0, ()),
}

TOY_TABLE = {
    "scalar": (([-2], [2]), ([-1], [1]), ([-1], [1]), ([-0.5], [0.5]), False, 0.5, 6.0, ()),
    "damped2": (([-2, -2], [2, 2]), ([-1], [1]), ([-1, -1], [1, 1]), ([-0.5] * 2, [0.5] * 2),
                True, 0.5, 6.0, ()),
    "double_integrator": (([-2, -2], [2, 2]), ([-1], [1]), ([-1, -1], [1, 1]), ([-0.5] * 2, [0.5] * 2),
                          True, 1.0, 6.0, (0,)),
}

BENCHMARKS = tuple(BENCHMARK_TABLE)


def _build(name, row, seed):
    X, U, X0, Xe0, sparse, rate, horizon, invariant = row
    f, B, dfdx, dbdx, _ = _compiled(name)
    n, m = len(X[0]), len(U[0])
    model = SystemModel(
        name=name, n=n, m=m,
        state_box=Box(*X), control_box=Box(*U), init_box=Box(*X0), init_error_box=Box(*Xe0),
        sparse=sparse, rate=rate, horizon=horizon, invariant=tuple(invariant),
        _f=f, _B=B, _dfdx=dfdx, _dbdx=dbdx)
    if name == "neural_lander":
        net = Mlp2(4, 3, hidden_dim=32, rng=np.random.default_rng(seed))
        net.b2.value[2] += LANDER_LIFT_BIAS  # ground effect lifts, so hover thrust stays inside U
        model.residual = ResidualHook(net)
        model.residual_mass = LANDER_MASS
    return model


def make_benchmark(name, seed=0):
    """Build one of the nine registered benchmark systems by name."""
    if name not in BENCHMARK_TABLE:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    return _build(name, BENCHMARK_TABLE[name], seed)


def make_toy(name):
    """Small synthetic systems used for hand-checkable tests.

    ``scalar``: ``xdot = -x + u`` (square, invertible B).
    ``damped2``: ``xdot = -x + [0; 1] u``.
    ``double_integrator``: ``xdot = (x_2, u)``.
    """
    if name not in TOY_TABLE:
        raise KeyError(f"unknown toy system {name!r}")
    return _build(name, TOY_TABLE[name], 0)


def make_system(name, seed=0):
    if name in TOY_TABLE:
        return make_toy(name)
    return make_benchmark(name, seed)


def with_boxes(model, **boxes):
    """Copy of ``model`` with some of its boxes replaced (custom systems)."""
    from dataclasses import replace
    return replace(model, **boxes)
