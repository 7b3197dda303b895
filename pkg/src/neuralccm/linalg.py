"""Small dense linear-algebra kernels.

Everything here works on plain ``numpy`` arrays and accepts an optional
leading batch dimension, so the same routine serves a single matrix and a
stack of a few thousand of them (grid checks, accuracy sweeps).
"""
from __future__ import annotations

import numpy as np

SYM_TOL = 1e-9
JACOBI_TOL = 1e-12
PIVOT_TOL = 1e-12


class ContractError(ValueError):
    """Input violates a documented precondition (shape, symmetry, rank)."""


class SingularMatrixError(ContractError):
    pass


def fro(a):
    a = np.asarray(a, dtype=float)
    return np.sqrt(np.sum(a * a, axis=(-2, -1)))


def _as_square_stack(a):
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ContractError(f"expected square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix has non-finite entries")
    lead = a.shape[:-2]
    n = a.shape[-1]
    return a.reshape((-1, n, n)), lead


def check_symmetric(a, tol=SYM_TOL):
    stack, _ = _as_square_stack(a)
    asym = fro(stack - np.swapaxes(stack, -1, -2))
    scale = fro(stack)
    bad = asym > tol * np.maximum(scale, 1e-300)
    bad &= asym > 0
    if np.any(bad):
        raise ContractError(
            f"matrix not symmetric: |a - a^T|_F = {asym[bad].max():.3e}")


def sym_eigvals(a, tol=JACOBI_TOL, max_sweeps=60):
    """Eigenvalues (ascending) of symmetric matrices by cyclic Jacobi.

    Sweeps until every matrix has off-diagonal Frobenius norm at most
    ``tol * |a|_F``. Works on ``(n, n)`` or ``(..., n, n)``.
    """
    stack, lead = _as_square_stack(a)
    check_symmetric(stack)
    w = 0.5 * (stack + np.swapaxes(stack, -1, -2))
    n = w.shape[-1]
    scale = fro(w)
    for _ in range(max_sweeps):
        off = np.sqrt(np.maximum(fro(w) ** 2 - np.sum(np.diagonal(w, axis1=1, axis2=2) ** 2, axis=1), 0.0))
        if np.all(off <= tol * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = w[:, p, q]
                active = np.abs(apq) > 1e-300
                if not np.any(active):
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (w[:, q, q] - w[:, p, p]) / (2.0 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(active, t, 0.0)
                c = (1.0 / np.sqrt(t * t + 1.0))[:, None]
                s = (t * c[:, 0])[:, None]
                colp = w[:, :, p].copy()
                colq = w[:, :, q].copy()
                w[:, :, p] = c * colp - s * colq
                w[:, :, q] = s * colp + c * colq
                rowp = w[:, p, :].copy()
                rowq = w[:, q, :].copy()
                w[:, p, :] = c * rowp - s * rowq
                w[:, q, :] = s * rowp + c * rowq
                w[:, p, q] = 0.0
                w[:, q, p] = 0.0
    vals = np.sort(np.diagonal(w, axis1=1, axis2=2), axis=1)
    return vals.reshape(lead + (n,))


def sym_eig_max(a):
    return sym_eigvals(a)[..., -1]


def sym_eig_min(a):
    return -sym_eig_max(-np.asarray(a, dtype=float))


def spectral_norm(a, max_iter=1000, rtol=1e-13):
    """Largest singular value of a single matrix.

    Power iteration on the smaller Gram matrix from a fixed pseudo-random
    start; falls back to a Jacobi eigensolve of the Gram matrix when the
    iteration stagnates.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix has non-finite entries")
    if a.size == 0:
        return 0.0
    g = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    if not np.any(g):
        return 0.0
    v = np.random.default_rng(12345).standard_normal(g.shape[0])
    v /= np.linalg.norm(v)
    mu = 0.0
    for _ in range(max_iter):
        gv = g @ v
        mu_new = float(v @ gv)
        norm = np.linalg.norm(gv)
        if norm == 0.0:
            break
        resid = np.linalg.norm(gv - mu_new * v)
        v = gv / norm
        if resid <= rtol * abs(mu_new) or abs(mu_new - mu) <= 1e-16 * abs(mu_new):
            if resid <= 1e-8 * abs(mu_new):
                return float(np.sqrt(max(mu_new, 0.0)))
            break
        mu = mu_new
    return float(np.sqrt(max(sym_eig_max(g), 0.0)))


def inverse(a):
    """Gauss-Jordan inverse with partial pivoting (batched)."""
    stack, lead = _as_square_stack(a)
    n = stack.shape[-1]
    bsz = stack.shape[0]
    scale = fro(stack)
    aug = np.concatenate([stack.copy(), np.broadcast_to(np.eye(n), stack.shape)], axis=2)
    rows = np.arange(bsz)
    for k in range(n):
        piv = k + np.argmax(np.abs(aug[:, k:, k]), axis=1)
        pval = aug[rows, piv, k]
        if np.any(np.abs(pval) <= PIVOT_TOL * scale) or np.any(pval == 0.0):
            raise SingularMatrixError("matrix is singular to working precision")
        swap = aug[rows, piv].copy()
        aug[rows, piv] = aug[:, k]
        aug[:, k] = swap
        aug[:, k] /= aug[:, k, k][:, None]
        factors = aug[:, :, k].copy()
        factors[:, k] = 0.0
        aug -= factors[:, :, None] * aug[:, k, None, :]
    return aug[:, :, n:].reshape(lead + (n, n))


def null_space_basis(b, rtol=1e-10):
    """Orthonormal basis of the complement of ``range(b)``.

    ``b`` is ``(n, m)`` (or a stack) with full column rank. Uses Householder
    QR of the full ``n x n`` extension and returns the trailing ``n - m``
    columns of Q, so ``basis.T @ b == 0`` to rounding. ``m >= n`` gives an
    empty ``(n, 0)`` basis.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim < 2:
        raise ContractError(f"expected a matrix, got shape {b.shape}")
    lead = b.shape[:-2]
    n, m = b.shape[-2:]
    r = b.reshape((-1, n, m)).copy()
    bsz = r.shape[0]
    if m >= n:
        return np.zeros(lead + (n, 0))
    q = np.broadcast_to(np.eye(n), (bsz, n, n)).copy()
    scale = fro(r)
    for k in range(m):
        x = r[:, k:, k]
        nx = np.linalg.norm(x, axis=1)
        if np.any(nx <= rtol * np.maximum(scale, 1.0)):
            raise ContractError("matrix is rank deficient")
        sgn = np.where(x[:, 0] >= 0, 1.0, -1.0)
        v = x.copy()
        v[:, 0] += sgn * nx
        # unnormalised v with beta = 2 / v.v keeps permutation-like reflections exact
        beta = 2.0 / np.einsum("bi,bi->b", v, v)
        beta[~np.any(x[:, 1:], axis=1)] = 0.0  # already reduced: skip the reflection
        r[:, k:, :] -= (beta[:, None] * v)[:, :, None] * np.einsum("bi,bij->bj", v, r[:, k:, :])[:, None, :]
        q[:, :, k:] -= (beta[:, None] * np.einsum("bij,bj->bi", q[:, :, k:], v))[:, :, None] * v[:, None, :]
    return q[:, :, m:].reshape(lead + (n, n - m))


def random_unit_vectors(rng, count, dim):
    p = rng.standard_normal((count, dim))
    return p / np.linalg.norm(p, axis=1, keepdims=True)
