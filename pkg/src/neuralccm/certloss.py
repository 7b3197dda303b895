"""Dual metric, tracking controller and the contraction losses.

Shapes: ``x``, ``xref`` are ``(b, n)``, ``uref`` is ``(b, m)``; matrices are
``(b, r, c)``. Every loss piece is built from recorded ``diffnet`` ops so
the empirical risk can be back-propagated to both networks at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .diffnet import Mlp2, Tensor, concat, contract_jacobian, einsum, fro_norm, inv, no_grad
from .dynamics import annihilator


def _selector(cols, n):
    """``(len(cols), n)`` matrix scattering a column subset back into ``n``."""
    s = np.zeros((len(cols), n))
    s[np.arange(len(cols)), list(cols)] = 1.0
    return s


class MetricNet:
    """``W(x) = C(x)^T C(x) + w_lb I``.

    With ``masked`` the lower-left ``m x (n-m)`` block of ``C`` is zero and
    its upper-left block comes from a second network that only sees the
    first ``n - m`` state coordinates, so the upper-left block of ``W`` does
    not depend on the last ``m`` coordinates.
    """

    def __init__(self, n, m, relevant=None, w_lb=0.1, w_ub=10.0, masked=False,
                 hidden_dim=128, rng=None, zero=False):
        self.n, self.m = n, m
        self.relevant = tuple(range(n)) if relevant is None else tuple(relevant)
        self.w_lb, self.w_ub, self.masked = float(w_lb), float(w_ub), bool(masked)
        rng = np.random.default_rng(0) if rng is None else rng
        self.net = Mlp2(len(self.relevant), n * n, hidden_dim, rng=rng, zero=zero)
        self.block_inputs = tuple(i for i in self.relevant if i < n - m)
        self.block_net = None
        if self.masked:
            k = n - m
            self.block_net = Mlp2(len(self.block_inputs), k * k, hidden_dim, rng=rng, zero=zero)
        self._sel = _selector(self.relevant, n).T
        self._bsel = _selector(self.block_inputs, n).T

    @property
    def params(self):
        ps = list(self.net.params)
        if self.block_net is not None:
            ps += self.block_net.params
        return ps

    def _assemble(self, full, block):
        b, n, k = full.shape[0], self.n, self.n - self.m
        top = concat([block, full[:, :k, k:]], axis=2)
        bottom = concat([np.zeros((b, n - k, k)), full[:, k:, k:]], axis=2)
        return concat([top, bottom], axis=1)

    def parts(self, x):
        """Return ``(C, W, dW)`` where ``dW(v)`` is the Lie derivative of W along v."""
        x = np.asarray(x, dtype=float)
        b, n, k = x.shape[0], self.n, self.n - self.m
        h, s = self.net.hidden(x @ self._sel)
        full = (h @ self.net.W2.T + self.net.b2).reshape(b, n, n)
        if self.masked:
            hb, sb = self.block_net.hidden(x @ self._bsel)
            block = (hb @ self.block_net.W2.T + self.block_net.b2).reshape(b, k, k)
            C = self._assemble(full, block)
        else:
            C = full
        W = C.T @ C + self.w_lb * np.eye(n)

        def dC(v):
            d = self.net.jvp(s, v @ self._sel).reshape(b, n, n)
            if self.masked:
                db = self.block_net.jvp(sb, v @ self._bsel).reshape(b, k, k)
                d = self._assemble(d, db)
            return d

        def dW(v):
            d = dC(v)
            return d.T @ C + C.T @ d

        return C, W, dW

    def W(self, x):
        with no_grad():
            return self.parts(np.atleast_2d(x))[1].value.reshape(np.shape(x)[:-1] + (self.n, self.n))


class ControllerNet:
    """Tracking controller with ``u(x, x, uref) = uref`` by construction.

    ``bottleneck``: ``u = w2(x, xr) tanh(w1(x, xr) (x - xr)) + uref``.
    ``simple``:     ``u = k(x, xr) (x - xr) + uref``.
    The weight networks see only the ``relevant`` state coordinates.
    """

    def __init__(self, n, m, arch="bottleneck", relevant=None, width=32, hidden_dim=128,
                 rng=None, zero=False):
        if arch not in ("bottleneck", "simple"):
            raise ValueError(f"unknown controller architecture {arch!r}")
        self.n, self.m, self.arch, self.width = n, m, arch, int(width)
        self.relevant = tuple(range(n)) if relevant is None else tuple(relevant)
        rng = np.random.default_rng(1) if rng is None else rng
        p = len(self.relevant)
        if arch == "bottleneck":
            self.w1net = Mlp2(2 * p, self.width * n, hidden_dim, rng=rng, zero=zero)
            self.w2net = Mlp2(2 * p, m * self.width, hidden_dim, rng=rng, zero=zero)
        else:
            self.knet = Mlp2(2 * p, m * n, hidden_dim, rng=rng, zero=zero)
        self._sel = _selector(self.relevant, n)

    @property
    def nets(self):
        return [self.w1net, self.w2net] if self.arch == "bottleneck" else [self.knet]

    @property
    def params(self):
        return [p for net in self.nets for p in net.params]

    def _inputs(self, x, xref):
        r = list(self.relevant)
        return np.concatenate([x[..., r], xref[..., r]], axis=-1)

    def forward(self, x, xref, uref):
        """Plain numpy control evaluation (no graph)."""
        x, xref, uref = (np.asarray(a, dtype=float) for a in (x, xref, uref))
        inp = self._inputs(x, xref)
        e = x - xref
        lead = x.shape[:-1]
        if self.arch == "bottleneck":
            w1 = self.w1net.forward(inp).reshape(lead + (self.width, self.n))
            w2 = self.w2net.forward(inp).reshape(lead + (self.m, self.width))
            z = np.tanh(np.einsum("...ck,...k->...c", w1, e))
            return np.einsum("...mc,...c->...m", w2, z) + uref
        k = self.knet.forward(inp).reshape(lead + (self.m, self.n))
        return np.einsum("...mk,...k->...m", k, e) + uref

    __call__ = forward

    def value_and_gain(self, x, xref, uref):
        """Recorded ``u`` and ``K = du/dx``, both as Tensors."""
        x, xref, uref = (np.asarray(a, dtype=float) for a in (x, xref, uref))
        b, n, m, c = x.shape[0], self.n, self.m, self.width
        p = len(self.relevant)
        inp = self._inputs(x, xref)
        e = x - xref
        xcols = slice(0, p)
        if self.arch == "bottleneck":
            h1, s1 = self.w1net.hidden(inp)
            w1 = (h1 @ self.w1net.W2.T + self.w1net.b2).reshape(b, c, n)
            z = einsum("bck,bk->bc", w1, e).tanh()
            h2, s2 = self.w2net.hidden(inp)
            w2 = (h2 @ self.w2net.W2.T + self.w2net.b2).reshape(b, m, c)
            u = einsum("bmc,bc->bm", w2, z) + uref
            g = contract_jacobian(self.w1net, s1, c, n, e, xcols) @ self._sel + w1
            t2 = contract_jacobian(self.w2net, s2, m, c, z, xcols) @ self._sel
            K = t2 + einsum("bmc,bc,bcn->bmn", w2, 1.0 - z * z, g)
            return u, K
        h, s = self.knet.hidden(inp)
        k = (h @ self.knet.W2.T + self.knet.b2).reshape(b, m, n)
        u = einsum("bmk,bk->bm", k, e) + uref
        K = k + contract_jacobian(self.knet, s, m, n, e, xcols) @ self._sel
        return u, K

    def gain(self, x, xref, uref):
        with no_grad():
            u, K = self.value_and_gain(np.atleast_2d(x), np.atleast_2d(xref), np.atleast_2d(uref))
        return u.value, K.value


@dataclass
class LossConfig:
    rate: float = 0.5
    num_dirs: int = 64
    margin: float = 0.0
    weights: dict = field(default_factory=lambda: {"contraction": 1.0, "c1": 1.0, "c2": 1.0, "cond": 1.0})
    use_c2: bool | None = None  # None: drop it exactly when the metric is masked
    form: str = "primal"  # which contraction matrix the hinge sees: "primal" (in M) or "dual" (in W)
    reduction: str = "mean"  # "mean" over all (sample, direction) pairs or over "violating" ones only
    worst_dir: bool = False

    def __post_init__(self):
        if self.reduction not in ("mean", "violating"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.form not in ("primal", "dual"):
            raise ValueError(f"unknown contraction form {self.form!r}")
        if self.rate <= 0:
            raise ValueError("contraction rate must be positive")
        if self.num_dirs < 1:
            raise ValueError("need at least one sampling direction")


def generalized_jacobian(dfdx, dbdx, u):
    """``A = df/dx + sum_i u_i db_i/dx`` for Tensor or ndarray ``u``."""
    if not np.any(dbdx):
        return dfdx
    return dfdx + einsum("bj,bjik->bik", u, dbdx) if isinstance(u, Tensor) else \
        dfdx + np.einsum("...j,...jik->...ik", u, dbdx)


def hinge_pd(a, dirs, margin=0.0, worst=False):
    """``max(0, margin - p^T a p)`` for every sample and direction, shape ``(b, K)``.

    With ``worst`` each sample also gets its own eigenvector for the smallest
    eigenvalue of ``a`` (held constant) as an extra direction.
    """
    q = einsum("kd,bde,ke->bk", dirs, a, dirs)
    if worst:
        sym = 0.5 * (a.value + np.swapaxes(a.value, -1, -2))
        v = np.linalg.eigh(sym)[1][..., 0]
        qw = einsum("bd,bde,be->b", v, a, v).reshape(-1, 1)
        q = concat([q, qw], axis=1)
    return (margin - q).relu()


def l_pd(a, dirs, margin=0.0):
    """Per-sample ``mean_i max(0, margin - p_i^T a p_i)`` over unit vectors ``dirs``."""
    return hinge_pd(a, dirs, margin).mean(axis=1)


def _dual_pieces(model, mn, cn, rate, x, xref, uref):
    dyn_f, dyn_B = model.f(x), model.B(x)
    dfdx, dbdx = model.dfdx(x), model.dbdx(x)
    u, K = cn.value_and_gain(x, xref, uref)
    C, W, dW = mn.parts(x)
    xdot = dyn_f + einsum("bnm,bm->bn", dyn_B, u)
    A = generalized_jacobian(dfdx, dbdx, u)
    F = A + dyn_B @ K
    FW = F @ W
    Wdot = dW(xdot)
    D = -Wdot + FW + FW.T + 2.0 * rate * W
    return dict(u=u, K=K, C=C, W=W, dW=dW, Wdot=Wdot, F=F, D=D, f=dyn_f, B=dyn_B, dfdx=dfdx,
                dbdx=dbdx, xdot=xdot)


def _primal(pc, rate):
    M = inv(pc["W"])
    MF = M @ pc["F"]
    return -(M @ pc["Wdot"] @ M) + MF + MF.T + 2.0 * rate * M


def contraction_matrix_dual(model, mn, cn, rate, x, xref, uref):
    """``-Wdot + (A+BK) W + W (A+BK)^T + 2 rate W`` (recorded Tensor)."""
    return _dual_pieces(model, mn, cn, rate, *_batch(x, xref, uref))["D"]


def contraction_matrix_primal(model, mn, cn, rate, x, xref, uref):
    """``Mdot + M(A+BK) + (M(A+BK))^T + 2 rate M`` with ``M = W^-1`` (numpy)."""
    with no_grad():
        pc = _dual_pieces(model, mn, cn, rate, *_batch(x, xref, uref))
        W = pc["W"].value
        Wdot = pc["dW"](pc["xdot"]).value
        F = (pc["dfdx"] if not np.any(pc["dbdx"]) else
             generalized_jacobian(pc["dfdx"], pc["dbdx"], pc["u"].value)) + pc["B"] @ pc["K"].value
    M = linalg.inverse(W)
    MF = M @ F
    return -M @ Wdot @ M + MF + np.swapaxes(MF, -1, -2) + 2.0 * rate * M


def _batch(*arrays):
    return tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in arrays)


def _plain(t):
    return None if t is None else t.value


def ccm_condition_c1(model, mn, rate, x):
    """``B_perp^T (-d_f W + A W + W A^T + 2 rate W) B_perp`` as an array, or None if B is square."""
    x = _batch(x)[0]
    with no_grad():
        C, W, dW = mn.parts(x)
        return _plain(_c1(model, W, dW, rate, x, model.f(x), model.dfdx(x)))


def _c1(model, W, dW, rate, x, f, dfdx):
    bp = annihilator(model, x)
    if bp.shape[-1] == 0:
        return None
    AW = dfdx @ W
    inner = -dW(f) + AW + AW.T + 2.0 * rate * W
    return np.swapaxes(bp, -1, -2) @ inner @ bp


def ccm_condition_c2(model, mn, x, j):
    x = _batch(x)[0]
    with no_grad():
        C, W, dW = mn.parts(x)
        return _plain(_c2(model, W, dW, x, model.B(x), model.dbdx(x), j))


def _c2(model, W, dW, x, B, dbdx, j):
    bp = annihilator(model, x)
    if bp.shape[-1] == 0:
        return None
    GW = dbdx[:, j] @ W
    inner = dW(B[:, :, j]) - GW - GW.T
    return np.swapaxes(bp, -1, -2) @ inner @ bp


def sample_dirs(rng, cfg, model):
    """Fresh unit vectors for the state-space and annihilator-space hinges."""
    k = model.n - model.m
    return (linalg.random_unit_vectors(rng, cfg.num_dirs, model.n),
            linalg.random_unit_vectors(rng, cfg.num_dirs, k) if k > 0 else None)


def empirical_risk(batch, model, mn, cn, cfg, dirs):
    """Mean empirical risk over ``batch = (x, xref, uref)`` and per-term means.

    Returns ``(total Tensor, {term: float})``.
    """
    x, xref, uref = _batch(*batch)
    dirs_n, dirs_k = dirs
    pc = _dual_pieces(model, mn, cn, cfg.rate, x, xref, uref)
    w = cfg.weights
    cu = pc["D"] if cfg.form == "dual" else _primal(pc, cfg.rate)
    wd = cfg.worst_dir
    terms = {"contraction": hinge_pd(-cu, dirs_n, cfg.margin, wd),
             "cond": hinge_pd(mn.w_ub * np.eye(model.n) - pc["W"], dirs_n, cfg.margin, wd)}
    c1 = _c1(model, pc["W"], pc["dW"], cfg.rate, x, pc["f"], pc["dfdx"])
    if c1 is not None:
        terms["c1"] = hinge_pd(-c1, dirs_k, cfg.margin, wd)
        use_c2 = (not mn.masked) if cfg.use_c2 is None else cfg.use_c2
        if use_c2:
            c2 = None
            for j in range(model.m):
                t = fro_norm(_c2(model, pc["W"], pc["dW"], x, pc["B"], pc["dbdx"], j))
                c2 = t if c2 is None else c2 + t
            terms["c2"] = c2
    total, report = None, {}
    for name, t in terms.items():
        report[name] = float(t.value.mean())
        if t.ndim == 2 and cfg.reduction == "violating":
            t = t.sum() / max(1, int(np.count_nonzero(t.value)))
        else:
            t = t.mean()
        t = t * w.get(name, 1.0)
        total = t if total is None else total + t
    return total, report


def pointwise_accuracy(model, mn, cn, rate, x, xref, uref, chunk=4096):
    """Fraction of samples whose dual contraction matrix has ``lambda_max < 0``."""
    x, xref, uref = _batch(x, xref, uref)
    good = 0
    with no_grad():
        for s in range(0, x.shape[0], chunk):
            sl = slice(s, s + chunk)
            D = contraction_matrix_dual(model, mn, cn, rate, x[sl], xref[sl], uref[sl]).value
            good += int(np.sum(linalg.sym_eig_max(0.5 * (D + np.swapaxes(D, -1, -2))) < 0))
    return good / x.shape[0]
