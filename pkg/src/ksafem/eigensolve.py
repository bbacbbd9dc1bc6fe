"""Lowest eigenpairs of ``(H + P P^T) u = mu M u``.

Small problems are solved densely.  Larger ones use block LOBPCG with
guard vectors, an SPD preconditioner and M-orthonormal Rayleigh-Ritz bases
built by scaled Gram eigendecomposition (SVQB).  Residuals are reported in
the exact ``M^-1`` norm.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, InvalidInputError

DENSE_LIMIT = 500
DEFAULT_TOL = 1e-8
# relative eigenvalue cutoff of the normalized Gram matrix when pruning a basis
GRAM_CUTOFF = 1e-10


@dataclass
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    iterations: int
    converged: bool = True


def m_orthonormalize(u: np.ndarray, m, tol: float = 1e-12) -> np.ndarray:
    """Symmetric (Lowdin) M-orthonormalization; leaves M-orthonormal input unchanged.

    Raises ``InvalidInputError`` when the columns are linearly dependent.
    """
    u = np.asarray(u, dtype=float)
    for _ in range(2):
        g = u.T @ (m @ u)
        g = 0.5 * (g + g.T)
        d = np.sqrt(np.diag(g))
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise InvalidInputError("columns are rank deficient with respect to M")
        gn = g / np.outer(d, d)
        theta, v = np.linalg.eigh(gn)
        if theta[0] <= tol * theta[-1]:
            raise InvalidInputError("columns are rank deficient with respect to M")
        root = (v / np.sqrt(theta)) @ v.T
        u = (u / d) @ root
    return u


def _operator(h, lowrank):
    if lowrank is None or lowrank.shape[1] == 0:
        return lambda x: h @ x
    return lambda x: h @ x + lowrank @ (lowrank.T @ x)


def minv_norms(m, r: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Column norms ``sqrt(r^T M^-1 r)`` using Jacobi-preconditioned CG on M."""
    r = np.asarray(r, dtype=float).reshape(r.shape[0], -1)
    if sp.issparse(m):
        dinv = 1.0 / m.diagonal()
        prec = spla.LinearOperator(m.shape, matvec=lambda x: dinv * x.ravel())
        out = np.empty(r.shape[1])
        for j in range(r.shape[1]):
            if not np.any(r[:, j]):
                out[j] = 0.0
                continue
            z, _ = spla.cg(m, r[:, j], rtol=rtol, atol=0.0, M=prec, maxiter=2000)
            out[j] = np.sqrt(max(float(r[:, j] @ z), 0.0))
        return out
    z = sla.cho_solve(sla.cho_factor(np.asarray(m)), r)
    return np.sqrt(np.maximum(np.sum(r * z, axis=0), 0.0))


def _dense(h, m, lowrank, n: int, tol: float) -> EigenResult:
    hd = h.toarray() if sp.issparse(h) else np.array(h, dtype=float)
    if lowrank is not None and lowrank.shape[1]:
        hd = hd + lowrank @ lowrank.T
    md = m.toarray() if sp.issparse(m) else np.asarray(m, dtype=float)
    hd = 0.5 * (hd + hd.T)
    vals, vecs = sla.eigh(hd, md, subset_by_index=[0, n - 1])
    res = minv_norms(md, hd @ vecs - (md @ vecs) * vals)
    return EigenResult(vals, vecs, res, 1, bool(np.all(res <= tol)))


def _svqb(s: np.ndarray, ms: np.ndarray) -> np.ndarray:
    """Coefficients ``Z`` with ``(S Z)^T M (S Z) ~ I``, dropping near-dependent directions."""
    g = s.T @ ms
    g = 0.5 * (g + g.T)
    d = np.sqrt(np.clip(np.diag(g), 0.0, None))
    keep = d > 0
    d_inv = np.zeros_like(d)
    d_inv[keep] = 1.0 / d[keep]
    gn = g * np.outer(d_inv, d_inv)
    theta, v = np.linalg.eigh(gn)
    ok = theta > GRAM_CUTOFF * theta[-1]
    return (d_inv[:, None] * v[:, ok]) / np.sqrt(theta[ok])


def default_preconditioner(h, m) -> Callable[[np.ndarray], np.ndarray]:
    """Jacobi preconditioner of ``H + sigma M`` with a shift making the diagonal positive."""
    hd, md = h.diagonal(), m.diagonal()
    sigma = 1.0 + max(0.0, float(-(hd / md).min()))
    dinv = 1.0 / (hd + sigma * md)
    return lambda r: dinv[:, None] * r


def smoothed_aggregation(a):
    """pyamg hierarchy for an SPD matrix, reproducible run to run.

    pyamg estimates spectral radii from ``np.random`` vectors, so the global
    state is seeded for the build and restored afterwards.
    """
    import pyamg
    state = np.random.get_state()
    np.random.seed(0)
    try:
        return pyamg.smoothed_aggregation_solver(sp.csr_matrix(a), symmetry="symmetric")
    finally:
        np.random.set_state(state)


def amg_preconditioner(a) -> Callable[[np.ndarray], np.ndarray]:
    """One smoothed-aggregation V-cycle per column of an SPD matrix."""
    ml = smoothed_aggregation(a)

    def apply(r):
        r = np.asarray(r)
        return np.column_stack([ml.solve(r[:, j], x0=np.zeros(len(r)), maxiter=1, tol=1e-30)
                                for j in range(r.shape[1])])

    return apply


def lowest_eigs(h, m, n: int, lowrank: np.ndarray | None = None, tol: float = DEFAULT_TOL,
                guess: np.ndarray | None = None, seed: int = 0,
                precond: Callable[[np.ndarray], np.ndarray] | None = None,
                maxiter: int = 1000, dense_limit: int = DENSE_LIMIT) -> EigenResult:
    """``n`` smallest eigenpairs with M-orthonormal vectors and ``M^-1`` residuals below ``tol``.

    ``guess`` (ndof, <= n+guards) seeds the block; missing columns are filled
    with seeded random vectors.  Raises ``ConvergenceError`` carrying the last
    iterate as ``diagnostics`` when ``maxiter`` is exhausted.
    """
    ndof = m.shape[0]
    if n < 1 or n > ndof:
        raise InvalidInputError(f"requested {n} eigenpairs of a problem with {ndof} unknowns")
    if ndof <= dense_limit:
        res = _dense(h, m, lowrank, n, tol)
        if not res.converged:
            raise ConvergenceError("dense eigensolve residual above tolerance", term="eigensolve",
                                   diagnostics=res)
        return res

    op = _operator(h, lowrank)
    precond = precond or default_preconditioner(h, m)
    dinv = 1.0 / m.diagonal()
    bs = min(ndof, n + max(2, (n + 1) // 2))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((ndof, bs))
    if guess is not None:
        g = np.asarray(guess, dtype=float).reshape(ndof, -1)[:, :bs]
        x[:, :g.shape[1]] = g
    z = _svqb(x, m @ x)
    x = x @ z
    if x.shape[1] < bs:
        raise InvalidInputError("initial block is rank deficient")
    ax, mx = op(x), m @ x
    lam, c = sla.eigh(0.5 * (x.T @ ax + ax.T @ x), x.T @ mx)
    x, ax, mx = x @ c, ax @ c, mx @ c
    p = ap = mp = None
    # the in-loop test uses diag(M)^-1 in place of M^-1; it is tightened
    # whenever the exact norm disagrees
    thr = 0.5 * tol
    for it in range(1, maxiter + 1):
        r = ax - mx * lam
        approx = np.sqrt(np.sum(r * r * dinv[:, None], axis=0))
        if np.all(approx[:n] <= thr):
            exact = minv_norms(m, r[:, :n])
            if np.all(exact <= tol):
                return EigenResult(lam[:n].copy(), x[:, :n].copy(), exact, it)
            thr *= 0.2
        active = approx > 0.1 * thr
        if not np.any(active):
            active[:n] = True
        w = precond(r[:, active])
        w = w - x @ (mx.T @ w)
        aw, mw = op(w), m @ w
        blocks, ablocks, mblocks = [x, w], [ax, aw], [mx, mw]
        if p is not None:
            blocks.append(p[:, active]); ablocks.append(ap[:, active]); mblocks.append(mp[:, active])
        s, as_, ms = np.hstack(blocks), np.hstack(ablocks), np.hstack(mblocks)
        z = _svqb(s, ms)
        ga = z.T @ (s.T @ as_) @ z
        gm = z.T @ (s.T @ ms) @ z
        theta, cc = sla.eigh(0.5 * (ga + ga.T), 0.5 * (gm + gm.T))
        y = z @ cc[:, :bs]
        x, ax, mx = s @ y, as_ @ y, ms @ y
        y[:bs] = 0.0
        p, ap, mp = s @ y, as_ @ y, ms @ y
        lam = theta[:bs]
        if it % 20 == 0:
            # refresh to stop drift of the implicitly updated products
            x = m_orthonormalize(x, m)
            ax, mx = op(x), m @ x
            lam, c = sla.eigh(0.5 * (x.T @ ax + ax.T @ x), x.T @ mx)
            x, ax, mx = x @ c, ax @ c, mx @ c
            p = ap = mp = None
    r = ax - mx * lam
    diag = EigenResult(lam[:n].copy(), x[:, :n].copy(), minv_norms(m, r[:, :n]), maxiter, False)
    raise ConvergenceError(f"LOBPCG did not converge in {maxiter} iterations", term="eigensolve",
                           diagnostics=diag)
