"""Deterministic and sampled guarantees for a learned metric/controller pair.

Covers Lipschitz bookkeeping for the largest eigenvalue of the contraction
matrix, grid certification of a Lipschitz function, metric eigenvalue bounds
and the disturbance tube bound.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from . import certloss, linalg
from .diffnet import no_grad
from .dynamics import Box

L_DTANH = 4.0 / (3.0 * math.sqrt(3.0))  # sup |tanh''|
# 2-norm of (x, e) -> (x, x - e); the grid lives in (x, e) coordinates
ERROR_COORDS_NORM = (1.0 + math.sqrt(5.0)) / 2.0
DEFAULT_GRID_CAP = 20_000_000


class UnsupportedArchitecture(ValueError):
    pass


class GridTooLarge(ValueError):
    def __init__(self, msg, points, required_tau):
        super().__init__(msg)
        self.points = points
        self.required_tau = required_tau


# --------------------------------------------------------------------------
# constants

_NAMES = ("L_Mdot", "L_M", "L_A", "L_B", "L_K", "S_M", "S_A", "S_B", "S_K")


@dataclass
class LipschitzBreakdown:
    L_Mdot: float = 0.0
    L_M: float = 0.0
    L_A: float = 0.0
    L_B: float = 0.0
    L_K: float = 0.0
    S_M: float = 0.0
    S_A: float = 0.0
    S_B: float = 0.0
    S_K: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in _NAMES:
            v = float(getattr(self, name))
            if not v >= 0:
                raise ValueError(f"{name} must be a nonnegative number, got {v}")
            setattr(self, name, v)

    def to_dict(self):
        return asdict(self)


def composite_lipschitz(b, rate):
    """Lipschitz constant of ``lambda_max`` of the contraction matrix."""
    return b.L_Mdot + 2.0 * (b.S_M * b.L_A + b.S_A * b.L_M + b.S_M * b.S_B * b.L_K
                             + b.S_B * b.S_K * b.L_M + b.S_M * b.S_K * b.L_B + rate * b.L_M)


def network_lipschitz(net):
    """``|W2|_2 |W1|_2``: a 2-norm Lipschitz bound for a tanh two-layer net."""
    return linalg.spectral_norm(net.W2.value) * linalg.spectral_norm(net.W1.value)


def _interval_output(net, lower, upper):
    """Entrywise bounds of ``net`` over the input box (tanh range propagation)."""
    W1, b1, W2, b2 = (p.value for p in net.params)
    c, r = (lower + upper) / 2, (upper - lower) / 2
    mid = W1 @ c + b1
    rad = np.abs(W1) @ r
    hl, hu = np.tanh(mid - rad), np.tanh(mid + rad)
    hc, hr = (hl + hu) / 2, (hu - hl) / 2
    return W2 @ hc + b2 - np.abs(W2) @ hr, W2 @ hc + b2 + np.abs(W2) @ hr


def _abs_bound(lo, hi):
    return np.maximum(np.abs(lo), np.abs(hi))


@dataclass
class SampledBound:
    value: float
    raw: float
    cover: float
    provenance: str = "sampled"


def sampled_bounds(evaluator, box, count=10_000, seed=0, lipschitz=None, probe=4):
    """Max of ``evaluator`` over ``count`` uniform samples in ``box``.

    With ``lipschitz`` the maximum is inflated by ``lipschitz * cover`` where
    ``cover`` is the largest distance from ``probe * count`` fresh points to
    the sample set (an estimate of its covering radius).
    """
    rng = np.random.default_rng(seed)
    pts = box.sample(rng, count)
    vals = np.asarray(evaluator(pts), dtype=float).reshape(-1)
    raw = float(np.max(vals))
    cover = 0.0
    if lipschitz is not None and lipschitz > 0:
        free = box.halfwidth > 0
        if np.any(free):
            tree = cKDTree(pts[:, free])
            cover = float(np.max(tree.query(box.sample(rng, probe * count)[:, free])[0]))
        return SampledBound(raw + lipschitz * cover, raw, cover)
    return SampledBound(raw, raw, 0.0)


@dataclass
class Region:
    """``x`` in ``state``, ``x - x*`` in ``error``, ``u*`` in ``control``."""
    state: Box
    error: Box
    control: Box

    @property
    def dims(self):
        return self.state.dim, self.control.dim

    def as_box(self):
        return Box(np.concatenate([self.state.lower, self.error.lower, self.control.lower]),
                   np.concatenate([self.state.upper, self.error.upper, self.control.upper]))

    def split(self, z):
        n, m = self.dims
        x, e, u = z[:, :n], z[:, n:2 * n], z[:, 2 * n:2 * n + m]
        return x, x - e, u

    def ref_box(self):
        return Box(self.state.lower - self.error.upper, self.state.upper - self.error.lower)

    def to_dict(self):
        return {"state": self.state.to_dict(), "error": self.error.to_dict(),
                "control": self.control.to_dict()}


def controller_constants_simple(cn, region):
    """``(L_K, S_K)`` for ``u = k(x, x*) (x - x*) + u*``."""
    if cn.arch != "simple":
        raise UnsupportedArchitecture("deterministic constants need the simple controller")
    net, n, m = cn.knet, cn.n, cn.m
    W1, W2 = net.W1.value, net.W2.value
    p = len(cn.relevant)
    A11 = np.zeros((W1.shape[0], n))
    A11[:, list(cn.relevant)] = W1[:, :p]
    norm_A1 = linalg.spectral_norm(W1)
    norm_A11 = linalg.spectral_norm(A11)
    rows = W2.reshape(m, n, -1)  # k[j, i] = rows[j, i] . h
    L_k = network_lipschitz(net)
    rel = list(cn.relevant)
    lo = np.concatenate([region.state.lower[rel], region.ref_box().lower[rel]])
    hi = np.concatenate([region.state.upper[rel], region.ref_box().upper[rel]])
    klo, khi = _interval_output(net, lo, hi)
    S_k = float(np.sqrt(np.sum(_abs_bound(klo, khi) ** 2)))
    e_sup = _abs_bound(region.error.lower, region.error.upper)
    L_ki = np.array([linalg.spectral_norm(rows[:, i, :]) * norm_A11 for i in range(n)])
    L_dki = np.array([linalg.spectral_norm(rows[:, i, :]) * norm_A11 * norm_A1 * L_DTANH
                      for i in range(n)])
    S_K = S_k + float(np.sum(e_sup * L_ki))
    L_K = L_k + float(np.sum(e_sup * L_dki)) + math.sqrt(2.0) * float(np.sum(L_ki))
    return L_K, S_K


@dataclass
class MetricConstants:
    L_M: float
    S_M: float
    L_W: float
    S_C: float
    m_lower: float
    m_upper: float
    sampled_w_max: float


def metric_constants(mn, state_box, count=10_000, seed=0):
    """Metric bounds over ``state_box``.

    ``S_C`` comes from interval propagation through the C networks, so
    ``lambda_max(W) <= S_C^2 + w_lb`` holds everywhere in the box.
    """
    n, k = mn.n, mn.n - mn.m
    rel = list(mn.relevant)
    lo, hi = _interval_output(mn.net, state_box.lower[rel], state_box.upper[rel])
    full = _abs_bound(lo, hi).reshape(n, n)
    L_C = network_lipschitz(mn.net)
    if mn.masked:
        bl = list(mn.block_inputs)
        blo, bhi = _interval_output(mn.block_net, state_box.lower[bl], state_box.upper[bl])
        full[:k, :k] = _abs_bound(blo, bhi).reshape(k, k)
        full[k:, :k] = 0.0
        L_C += network_lipschitz(mn.block_net)
    S_C = float(np.sqrt(np.sum(full ** 2)))
    L_W = 2.0 * S_C * L_C
    w = mn.w_lb
    sampled = sampled_bounds(lambda x: linalg.sym_eig_max(mn.W(x)), state_box, count=min(count, 4000),
                             seed=seed)
    return MetricConstants(L_M=L_W / w ** 2, S_M=1.0 / w, L_W=L_W, S_C=S_C,
                           m_lower=1.0 / (S_C ** 2 + w), m_upper=1.0 / w,
                           sampled_w_max=sampled.raw)


def dubins_constants(v_max):
    """Analytic ``(L_A, S_A, L_B, S_B)`` for the Dubins car with ``|v| <= v_max``."""
    return math.sqrt(2.0 + v_max ** 2), math.sqrt(1.0 + v_max ** 2), 0.0, 1.0


def _spectral_stack(a):
    return np.sqrt(np.maximum(linalg.sym_eig_max(np.swapaxes(a, -1, -2) @ a), 0.0))


def dynamics_constants(model, region, count=10_000, seed=0, h=1e-6):
    """``(L_A, S_A, L_B, S_B, provenance)``; analytic for Dubins, sampled otherwise.

    ``A = df/dx + sum_j u_j db_j/dx`` evaluated with ``u`` in the control box.
    """
    if model.name == "dubins":
        vmax = float(max(abs(region.state.lower[3]), abs(region.state.upper[3])))
        return (*dubins_constants(vmax), {k: "analytic" for k in ("L_A", "S_A", "L_B", "S_B")})
    box = Box(np.concatenate([region.state.lower, model.control_box.lower]),
              np.concatenate([region.state.upper, model.control_box.upper]))
    n = model.n

    def amat(z):
        return certloss.generalized_jacobian(model.dfdx(z[:, :n]), model.dbdx(z[:, :n]), z[:, n:])

    def jac_norm(fun, z):
        tot = 0.0
        for i in range(n):
            dz = np.zeros(z.shape[1])
            dz[i] = h
            d = (fun(z + dz) - fun(z - dz)) / (2 * h)
            tot = tot + np.sum(d.reshape(d.shape[0], -1) ** 2, axis=1)
        return np.sqrt(tot)

    S_A = sampled_bounds(lambda z: _spectral_stack(amat(z)), box, count, seed).value
    L_A = sampled_bounds(lambda z: jac_norm(amat, z), box, count, seed).value
    S_B = sampled_bounds(lambda z: _spectral_stack(model.B(z[:, :n])), box, count, seed).value
    L_B = sampled_bounds(lambda z: jac_norm(lambda w: model.B(w[:, :n]), z), box, count, seed).value
    return L_A, S_A, L_B, S_B, {k: "sampled" for k in ("L_A", "S_A", "L_B", "S_B")}


def mdot_field(model, mn, cn, z, region):
    """``Mdot(x, x*, u*) = -M Wdot M`` for stacked region points ``z``."""
    x, xr, ur = region.split(z)
    with no_grad():
        pc = certloss._dual_pieces(model, mn, cn, 1.0, x, xr, ur)
        W, Wdot = pc["W"].value, pc["Wdot"].value
    M = linalg.inverse(W)
    return -M @ Wdot @ M


def lipschitz_mdot(model, mn, cn, region, count=10_000, seed=0, h=1e-5, refine=8, maxiter=60):
    """Sampled Lipschitz estimate of ``Mdot`` over the region.

    Frobenius norm of a central-difference Jacobian at ``count`` uniform
    points, then the ``refine`` largest are pushed uphill with bounded
    L-BFGS-B. The result is an estimate, not a bound.
    """
    box = region.as_box()
    free = np.flatnonzero(box.halfwidth > 0)

    def jac_norm(z):
        z = np.atleast_2d(z)
        tot = np.zeros(z.shape[0])
        for i in free:
            dz = np.zeros(z.shape[1])
            dz[i] = h
            d = (mdot_field(model, mn, cn, z + dz, region) - mdot_field(model, mn, cn, z - dz, region)) / (2 * h)
            tot += np.sum(d.reshape(d.shape[0], -1) ** 2, axis=1)
        return np.sqrt(tot)

    rng = np.random.default_rng(seed)
    pts = box.sample(rng, count)
    vals = np.concatenate([jac_norm(pts[s:s + 2000]) for s in range(0, count, 2000)])
    best = float(np.max(vals))
    bounds = list(zip(box.lower, box.upper))
    for idx in np.argsort(vals)[::-1][:refine]:
        res = minimize(lambda z: -jac_norm(z)[0], pts[idx], method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": maxiter})
        best = max(best, float(-res.fun))
    return best


def lipschitz_breakdown(model, mn, cn, region, rate, count=10_000, seed=0):
    """All constants for the simple-controller certificate, with provenance tags."""
    mc = metric_constants(mn, region.state, count, seed)
    L_K, S_K = controller_constants_simple(cn, region)
    L_A, S_A, L_B, S_B, prov = dynamics_constants(model, region, count, seed)
    L_Mdot = lipschitz_mdot(model, mn, cn, region, count, seed)
    prov = dict(prov)
    prov.update(L_Mdot="sampled", L_M="spectral-bound", S_M="analytic", L_K="spectral-bound",
                S_K="spectral-bound")
    b = LipschitzBreakdown(L_Mdot, mc.L_M, L_A, L_B, L_K, mc.S_M, S_A, S_B, S_K, prov)
    return b, mc


# --------------------------------------------------------------------------
# grid certification

@dataclass
class CertificateReport:
    region: dict
    rate: float
    tau: float
    lipschitz: float
    grid_points: int
    worst: float
    margin: float
    verdict: str
    counterexample: list | None = None
    breakdown: dict | None = None
    m_lower: float | None = None
    m_upper: float | None = None
    caveat: str = ""

    def __post_init__(self):
        if (self.verdict == "certified") != (self.worst < self.margin):
            raise ValueError("verdict inconsistent with margin")

    def to_dict(self):
        return asdict(self)


def grid_shape(lower, upper, tau):
    """Points per axis so every box point is within ``tau`` of the grid."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    width = upper - lower
    d = int(np.count_nonzero(width > 0))
    if d == 0:
        return np.ones_like(width, dtype=int)
    h = 2.0 * tau / math.sqrt(d)
    return np.where(width > 0, np.ceil(width / h).astype(int) + 1, 1)


def required_tau(lower, upper, cap):
    """Smallest cover radius whose grid stays within ``cap`` points (approximate)."""
    width = np.asarray(upper, float) - np.asarray(lower, float)
    w = width[width > 0]
    if w.size == 0:
        return 0.0
    d = w.size
    lo, hi = 1e-12, float(np.linalg.norm(w))
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if np.prod(grid_shape(lower, upper, mid).astype(float)) > cap:
            lo = mid
        else:
            hi = mid
    return hi if d else 0.0


def grid_verify(g, lower, upper, tau, lipschitz, cap=DEFAULT_GRID_CAP, chunk=20_000, workers=1,
                region_info=None, rate=0.0):
    """Certify ``g < 0`` on a box from a ``tau``-cover and a Lipschitz constant.

    ``g`` maps an ``(k, d)`` array of points to ``(k,)`` values. Certified
    iff every grid value is below ``-lipschitz * tau``; refuted (with the
    first offending grid point) iff some value is ``>= 0``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if lipschitz < 0:
        raise ValueError("Lipschitz constant must be nonnegative")
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    shape = grid_shape(lower, upper, tau)
    total = int(np.prod(shape.astype(object)))
    if total > cap:
        need = required_tau(lower, upper, cap)
        raise GridTooLarge(f"grid needs {total} points (cap {cap}); tau >= {need:.3g} fits", total, need)
    axes = [np.linspace(lo, hi, k) if k > 1 else np.array([(lo + hi) / 2])
            for lo, hi, k in zip(lower, upper, shape)]
    margin = -lipschitz * tau

    def block(start):
        idx = np.arange(start, min(start + chunk, total))
        sub = np.stack(np.unravel_index(idx, tuple(shape)), axis=1)
        pts = np.stack([axes[j][sub[:, j]] for j in range(len(axes))], axis=1)
        return pts, np.asarray(g(pts), dtype=float).reshape(-1)

    starts = range(0, total, chunk)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            results = pool.map(block, starts)
            worst, counter = _reduce(results)
    else:
        worst, counter = _reduce(block(s) for s in starts)
    if counter is not None:
        verdict = "refuted"
    elif worst < margin:
        verdict = "certified"
    else:
        verdict = "inconclusive"
    return CertificateReport(region=region_info or {"lower": lower.tolist(), "upper": upper.tolist()},
                             rate=rate, tau=tau, lipschitz=lipschitz, grid_points=total, worst=worst,
                             margin=margin, verdict=verdict,
                             counterexample=None if counter is None else counter.tolist())


def _reduce(results):
    worst, counter = -math.inf, None
    for pts, vals in results:
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("evaluator returned a non-finite value")
        worst = max(worst, float(np.max(vals)))
        if counter is None:
            bad = np.flatnonzero(vals >= 0)
            if bad.size:
                counter = pts[bad[0]]
    return worst, counter


def contraction_evaluator(model, mn, cn, region, rate):
    """``z -> lambda_max`` of the primal contraction matrix at region points."""
    def g(z):
        x, xr, ur = region.split(z)
        C = certloss.contraction_matrix_primal(model, mn, cn, rate, x, xr, ur)
        return linalg.sym_eig_max(0.5 * (C + np.swapaxes(C, -1, -2)))
    return g


def certify(model, mn, cn, region, rate, tau, count=10_000, seed=0, cap=DEFAULT_GRID_CAP, workers=1,
            breakdown=None):
    """Full deterministic pipeline: constants, composite L, grid check."""
    if breakdown is None:
        breakdown, mc = lipschitz_breakdown(model, mn, cn, region, rate, count, seed)
    else:
        mc = metric_constants(mn, region.state, count, seed)
    L = composite_lipschitz(breakdown, rate) * ERROR_COORDS_NORM
    box = region.as_box()
    rep = grid_verify(contraction_evaluator(model, mn, cn, region, rate), box.lower, box.upper, tau, L,
                      cap=cap, workers=workers, region_info=region.to_dict(), rate=rate)
    rep.breakdown = breakdown.to_dict()
    rep.m_lower, rep.m_upper = mc.m_lower, mc.m_upper
    if rep.verdict == "certified" and "sampled" in breakdown.provenance.values():
        rep.caveat = "certified modulo sampled L_Mdot"
    return rep


# --------------------------------------------------------------------------
# tube bound

@dataclass
class TubeBound:
    R0: float
    eps: float
    rate: float
    m_lower: float
    m_upper: float

    def __post_init__(self):
        if not (self.m_upper >= self.m_lower > 0):
            raise ValueError("need m_upper >= m_lower > 0")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.eps < 0 or self.R0 < 0:
            raise ValueError("eps and R0 must be nonnegative")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        decay = np.exp(-self.rate * t)
        return (self.R0 / math.sqrt(self.m_lower) * decay
                + math.sqrt(self.m_upper / self.m_lower) * self.eps / self.rate * (1.0 - decay))

    @property
    def limit(self):
        return math.sqrt(self.m_upper / self.m_lower) * self.eps / self.rate


def tube_bound(m_lower, m_upper, rate, eps, x1_0, x2_0):
    """Distance bound between an undisturbed and a disturbed closed-loop run.

    ``R0`` is bounded by the straight-line path length ``sqrt(m_upper)|dx0|``.
    """
    dx = np.asarray(x1_0, float) - np.asarray(x2_0, float)
    return TubeBound(math.sqrt(m_upper) * float(np.linalg.norm(dx)), float(eps), float(rate),
                     float(m_lower), float(m_upper))
