"""Reference generation, disturbances, closed-loop rollouts and tracking scores."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear, minimize_scalar

DEFAULT_FREQS = tuple(round(0.1 * k, 1) for k in range(1, 11))
REFERENCE_BOX_FACTOR = 1.5
DIVERGENCE_BOX_FACTOR = 3.0
CURVE_FLOOR = 1e-9


class NormalizationError(ValueError):
    """Tracking error curve requested with zero initial error."""


class ReferenceExitError(RuntimeError):
    """No admissible reference found within the retry budget."""


@dataclass
class ReferenceSpec:
    horizon: float | None = None  # None: benchmark default
    dt: float = 0.01
    freqs: tuple = DEFAULT_FREQS
    weight_range: tuple = (-1.0, 1.0)
    amplitude: float = 1.0  # fraction of the control half-width used by the sinusoids
    max_retries: int = 60
    retry_decay: float = 0.85  # amplitude multiplier applied on every redraw

    def __post_init__(self):
        if self.horizon is not None and self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class Reference:
    """``x*(0)`` plus a control signal; ``xstar`` is a fine RK4 solution on ``t``."""
    t: np.ndarray
    xstar: np.ndarray
    ustar: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    freqs: np.ndarray
    weights: np.ndarray  # (len(freqs), m)
    lower: np.ndarray
    upper: np.ndarray
    seed: int = 0

    @property
    def x0(self):
        return self.xstar[0]

    @property
    def horizon(self):
        return float(self.t[-1])

    def u(self, t):
        """Reference control at time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        s = np.sin(2.0 * np.pi * t[..., None] * self.freqs)  # (..., F)
        raw = self.center + self.scale * (s @ self.weights)
        return np.clip(raw, self.lower, self.upper)


@dataclass
class DisturbanceSpec:
    sigma: float = 0.0
    min_len: float = 0.0
    max_len: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0 <= self.min_len < self.max_len:
            raise ValueError("need 0 <= min_len < max_len")


@dataclass
class Disturbance:
    """Piecewise-constant signal: value ``values[k]`` on ``[breaks[k], breaks[k+1])``."""
    breaks: np.ndarray
    values: np.ndarray
    sigma: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.values) - 1)
        return self.values[k]


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    xstar: np.ndarray
    u: np.ndarray
    ustar: np.ndarray
    d: np.ndarray
    diverged: bool = False
    stepper: str = "rk4"

    def __post_init__(self):
        k = len(self.t)
        if any(len(a) != k for a in (self.x, self.xstar, self.u, self.ustar, self.d)):
            raise ValueError("trajectory arrays must have equal length")


@dataclass
class QualityScores:
    scores: list
    metric: str
    alpha: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in ("auc", "neg_rate"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def q(self):
        return conformal_quantile(self.scores, self.alpha)

    def to_dict(self):
        idx, q = conformal_quantile(self.scores, self.alpha, with_index=True)
        out = {"metric": self.metric, "alpha": self.alpha, "n": len(self.scores),
               "quantile_index": idx, "q": q if math.isfinite(q) else None,
               "scores": [float(s) for s in self.scores]}
        out.update(self.extra)
        return out


def _tracked(model):
    inv = set(model.invariant)
    return [i for i in range(model.n) if i not in inv]


def inside(model, x, factor):
    """``x`` lies in the scaled state box on the non-invariant coordinates."""
    box = model.state_box.scaled(factor)
    idx = _tracked(model)
    x = np.asarray(x)
    return bool(np.all(x[..., idx] >= box.lower[idx]) and np.all(x[..., idx] <= box.upper[idx]))


def _rk4_step(fun, t, y, h):
    k1 = fun(t, y)
    k2 = fun(t + h / 2, y + h / 2 * k1)
    k3 = fun(t + h / 2, y + h / 2 * k2)
    k4 = fun(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _open_loop(model, ref_u):
    def rhs(t, x):
        u = ref_u(t)
        return (model.f(x[None])[0] + model.B(x[None])[0] @ u)
    return rhs


def trim_control(model, x):
    """Control in the box minimising the state derivative on non-invariant rows."""
    box = model.control_box
    x = np.asarray(x, dtype=float)[None]
    rows = _tracked(model)
    A = model.B(x)[0][rows]
    b = -model.f(x)[0][rows]
    free = box.halfwidth > 0
    u = box.center.copy()
    if np.any(free):
        rhs = b - A[:, ~free] @ u[~free]
        u[free] = lsq_linear(A[:, free], rhs, bounds=(box.lower[free], box.upper[free])).x
    return u


def gen_reference(model, spec=None, seed=0, x0=None, weights=None):
    """Sample a sinusoidal reference control and integrate ``x*`` from ``x*(0)``.

    ``u*(t)`` is the trim control at ``x*(0)`` plus a weighted sum of sines,
    clipped to the control box.

    Redraws (new derived seed, amplitude shrunk by ``retry_decay``) while the
    reference leaves 1.5x the state box on the non-invariant coordinates; the
    final redraw holds the trim control (open-loop unstable plants).
    """
    spec = ReferenceSpec() if spec is None else spec
    T = model.horizon if spec.horizon is None else float(spec.horizon)
    steps = max(1, int(round(T / spec.dt)))
    t = np.linspace(0.0, steps * spec.dt, steps + 1)
    ubox = model.control_box
    freqs = np.asarray(spec.freqs, dtype=float)
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng([seed, attempt])
        w = rng.uniform(*spec.weight_range, size=(len(freqs), model.m)) if weights is None \
            else np.asarray(weights, dtype=float).reshape(len(freqs), model.m)
        norm = np.maximum(np.sum(np.abs(w), axis=0), 1e-12)
        last = attempt == spec.max_retries - 1 and weights is None
        scale = (0.0 if last else spec.amplitude * spec.retry_decay ** attempt) * ubox.halfwidth / norm
        start = model.init_box.sample(rng, 1)[0] if x0 is None else np.asarray(x0, dtype=float)
        ref = Reference(t, None, None, trim_control(model, start), scale, freqs, w, ubox.lower, ubox.upper, seed)
        rhs = _open_loop(model, ref.u)
        xs = np.empty((steps + 1, model.n))
        xs[0] = start
        ok = True
        for k in range(steps):
            xs[k + 1] = _rk4_step(rhs, t[k], xs[k], spec.dt)
            if not np.all(np.isfinite(xs[k + 1])) or not inside(model, xs[k + 1], REFERENCE_BOX_FACTOR):
                ok = False
                break
        if ok:
            ref.xstar = xs
            ref.ustar = ref.u(t)
            return ref
        if weights is not None and x0 is not None:
            break
    raise ReferenceExitError(f"reference left {REFERENCE_BOX_FACTOR}x the state box after "
                             f"{attempt + 1} attempts")


def gen_disturbance(spec, horizon, dim, seed=0):
    """Piecewise-constant disturbance with piece norms uniform in ``[0, sigma]``."""
    rng = np.random.default_rng(seed)
    breaks, values = [0.0], []
    while breaks[-1] < horizon:
        mag = rng.uniform(0.0, spec.sigma) if spec.sigma > 0 else 0.0
        direction = rng.standard_normal(dim)
        direction /= max(np.linalg.norm(direction), 1e-300)
        values.append(mag * direction)
        breaks.append(breaks[-1] + rng.uniform(spec.min_len, spec.max_len))
    return Disturbance(np.asarray(breaks), np.asarray(values).reshape(-1, dim), float(spec.sigma))


def zero_disturbance(dim):
    return Disturbance(np.array([0.0, np.inf]), np.zeros((1, dim)), 0.0)


def simulate(model, controller, reference, disturbance=None, dt=None, stepper="rk4", x0=None):
    """Closed-loop rollout of ``xdot = f + B u(x, x*, u*) + d``.

    The plant and the reference are integrated together with the same
    stepper; ``u``, ``u*`` and ``d`` are sampled at grid points and held over
    each step. Leaving 3x the state box stops the rollout and sets
    ``diverged``.
    """
    if stepper not in ("rk4", "euler"):
        raise ValueError(f"unknown stepper {stepper!r}")
    n = model.n
    t = reference.t if dt is None else np.arange(0.0, reference.horizon + dt / 2, dt)
    dist = zero_disturbance(n) if disturbance is None else disturbance
    steps = len(t) - 1
    X = np.empty((steps + 1, 2, n))
    X[0, 0] = reference.x0 if x0 is None else np.asarray(x0, dtype=float)
    X[0, 1] = reference.x0
    U = np.zeros((steps + 1, model.m))
    US = reference.u(t)
    Dd = np.zeros((steps + 1, n))
    diverged = False
    last = steps
    for k in range(steps + 1):
        x, xs = X[k]
        U[k] = controller(x, xs, US[k])
        Dd[k] = dist(t[k])
        if k == steps:
            break
        held = np.stack([U[k], US[k]])
        push = np.stack([Dd[k], np.zeros(n)])

        def rhs(_t, y, held=held, push=push):
            return model.f(y) + np.einsum("bnm,bm->bn", model.B(y), held) + push

        h = t[k + 1] - t[k]
        X[k + 1] = _rk4_step(rhs, t[k], X[k], h) if stepper == "rk4" else X[k] + h * rhs(t[k], X[k])
        if not np.all(np.isfinite(X[k + 1, 0])) or not inside(model, X[k + 1, 0], DIVERGENCE_BOX_FACTOR):
            diverged, last = True, k + 1
            U[k + 1] = np.nan
            Dd[k + 1] = dist(t[k + 1])
            break
    sl = slice(0, last + 1)
    if diverged:
        U[last] = U[last - 1]
    return Trajectory(t[sl].copy(), X[sl, 0].copy(), X[sl, 1].copy(), U[sl].copy(), US[sl].copy(),
                      Dd[sl].copy(), diverged, stepper)


def sample_initial_state(model, xstar0, rng):
    return np.asarray(xstar0, dtype=float) + model.init_error_box.sample(rng, 1)[0]


def normalized_error_curve(traj, normalized=True):
    err = np.linalg.norm(np.asarray(traj.x) - np.asarray(traj.xstar), axis=1)
    if not normalized:
        return err
    if err[0] <= 0:
        raise NormalizationError("initial tracking error is zero; use normalized=False")
    return err / err[0]


def auc(curve, horizon, per_time=False):
    """Trapezoidal area under a curve sampled uniformly on ``[0, horizon]``."""
    curve = np.asarray(curve, dtype=float)
    if curve.size < 2:
        return 0.0
    h = horizon / (curve.size - 1)
    area = h * (np.sum(curve) - 0.5 * (curve[0] + curve[-1]))
    return float(area / horizon) if per_time else float(area)


def _envelope_c(curve, t, lam):
    return max(1.0, float(np.max(curve * np.exp(lam * t))))


def _envelope_auc(c, lam, horizon):
    return c * horizon if lam == 0 else c * (1.0 - math.exp(-lam * horizon)) / lam


def fit_convergence(curves, t, lam_max=50.0):
    """Overshoot ``C >= 1`` and per-curve rates with ``x_e(t) <= C exp(-lam t)``.

    ``(C, lam)`` minimise the envelope area on the worst-overshoot curve;
    then each curve gets the largest rate compatible with that ``C``.
    """
    if len(curves) == 0:
        raise ValueError("fit_convergence needs at least one curve")
    t = np.asarray(t, dtype=float)
    curves = [np.maximum(np.asarray(c, dtype=float), CURVE_FLOOR) for c in curves]
    if any(c.shape != t.shape for c in curves):
        raise ValueError("every curve must be sampled on t")
    worst = max(curves, key=lambda c: float(np.max(c)))
    horizon = float(t[-1])

    def cost(lam):
        return _envelope_auc(_envelope_c(worst, t, lam), lam, horizon)

    grid = np.concatenate([[0.0], np.geomspace(1e-4, lam_max, 400)])
    costs = [cost(g) for g in grid]
    i = int(np.argmin(costs))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    best_lam, best = grid[i], costs[i]
    if hi > lo:
        res = minimize_scalar(cost, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        if res.fun <= best:
            best_lam, best = float(res.x), float(res.fun)
    C = _envelope_c(worst, t, best_lam)
    pos = t > 0
    rates = []
    for c in curves:
        r = np.min((math.log(C) - np.log(c[pos])) / t[pos]) if np.any(pos) else 0.0
        rates.append(max(0.0, float(r)))
    return C, rates


def conformal_quantile(scores, alpha, with_index=False):
    """Order statistic ``ceil((1-alpha)(n+1))`` of the scores (``inf`` if out of range).

    A fresh exchangeable score exceeds the result with probability at most
    ``alpha``.
    """
    scores = np.sort(np.asarray(scores, dtype=float))
    n = scores.size
    if n < 1:
        raise ValueError("need at least one score")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    idx = math.ceil((1.0 - alpha) * (n + 1) - 1e-12)
    q = float(scores[idx - 1]) if idx <= n else math.inf
    return (idx, q) if with_index else q


@dataclass
class Rollouts:
    trajectories: list
    curves: list
    aucs: list
    aucs_per_time: list
    C: float
    rates: list

    def scores(self, metric, alpha):
        if metric == "auc":
            return QualityScores(list(self.aucs), "auc", alpha)
        return QualityScores([0.0 - r for r in self.rates], "neg_rate", alpha, {"C": self.C})


def evaluate(model, controller, runs=100, seed=0, sigma=0.0, spec=None, dt=None, stepper="rk4",
             workers=1):
    """Independent rollouts with per-run seeds; curves and scores for each."""
    spec = ReferenceSpec() if spec is None else spec

    def one(i):
        rng = np.random.default_rng([seed, i, 7])
        ref = gen_reference(model, spec, seed=int(rng.integers(2**31)))
        x0 = sample_initial_state(model, ref.x0, rng)
        dist = gen_disturbance(DisturbanceSpec(sigma), ref.horizon, model.n, seed=int(rng.integers(2**31)))
        return simulate(model, controller, ref, dist, dt=dt, stepper=stepper, x0=x0)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trajs = list(pool.map(one, range(runs)))
    else:
        trajs = [one(i) for i in range(runs)]
    curves = [normalized_error_curve(tr) for tr in trajs]
    aucs = [auc(c, tr.t[-1]) for c, tr in zip(curves, trajs)]
    aucs_t = [auc(c, tr.t[-1], per_time=True) for c, tr in zip(curves, trajs)]
    full = [(c, tr.t) for c, tr in zip(curves, trajs) if not tr.diverged]
    C = fit_convergence([c for c, _ in full], full[0][1])[0] if full else 1.0
    rates = []
    for c, tr in zip(curves, trajs):
        pos = tr.t > 0
        r = np.min((math.log(C) - np.log(np.maximum(c[pos], CURVE_FLOOR))) / tr.t[pos])
        rates.append(0.0 if tr.diverged else max(0.0, float(r)))
    return Rollouts(trajs, curves, aucs, aucs_t, C, rates)


def trajectory_header(n, m):
    return (["t"] + [f"x_{i}" for i in range(1, n + 1)] + [f"xstar_{i}" for i in range(1, n + 1)]
            + [f"u_{i}" for i in range(1, m + 1)] + [f"ustar_{i}" for i in range(1, m + 1)]
            + [f"d_{i}" for i in range(1, n + 1)])


def write_trajectory_csv(traj, path):
    n, m = traj.x.shape[1], traj.u.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_header(n, m))
        for k in range(len(traj.t)):
            row = np.concatenate([[traj.t[k]], traj.x[k], traj.xstar[k], traj.u[k], traj.ustar[k], traj.d[k]])
            w.writerow([repr(float(v)) for v in row])


def read_trajectory_csv(path, n, m):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != trajectory_header(n, m):
        raise ValueError("unexpected trajectory header")
    a = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))
    cuts = np.cumsum([1, n, n, m, m])
    t, x, xs, u, us, d = np.split(a, cuts, axis=1)
    return Trajectory(t[:, 0], x, xs, u, us, d)


def write_scores_json(scores, path):
    with open(path, "w") as fh:
        json.dump(scores.to_dict(), fh, indent=2)
