"""Euclidean projection onto a polytope by a primal active-set method.

Solves  min ||x - c||^2  s.t.  A_eq x = b_eq,  G x >= h  starting from a
feasible point.  The problems here are tiny (a handful of areas and at most a
few hundred generated coalitions), so dense linear algebra is fine.
"""

from __future__ import annotations

import numpy as np

from .errors import SolverFailure


def _null_projector(rows: np.ndarray, n: int) -> np.ndarray:
    if rows.shape[0] == 0:
        return np.eye(n)
    q, r = np.linalg.qr(rows.T)
    rank = int(np.sum(np.abs(np.diag(r)) > 1e-12))
    q = q[:, :rank]
    return np.eye(n) - q @ q.T


def _independent(rows: list[np.ndarray], cand: np.ndarray) -> bool:
    if not rows:
        return bool(np.linalg.norm(cand) > 1e-12)
    m = np.vstack(rows + [cand])
    return np.linalg.matrix_rank(m, tol=1e-10) == len(rows) + 1


def _merge_rows(G: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize rows and keep the tightest copy of each direction."""
    best: dict[tuple, tuple[np.ndarray, float]] = {}
    for g, v in zip(G, h):
        nrm = float(np.linalg.norm(g))
        if nrm <= 1e-14:
            continue
        g, v = g / nrm, v / nrm
        key = tuple(np.round(g, 12))
        if key not in best or v > best[key][1]:
            best[key] = (g, v)
    if not best:
        return np.zeros((0, G.shape[1])), np.zeros(0)
    rows = list(best.values())
    return np.array([r for r, _ in rows]), np.array([v for _, v in rows])


def project(
    c,
    A_eq,
    b_eq,
    G,
    h,
    x0,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> np.ndarray:
    c = np.asarray(c, float)
    n = c.size
    A_eq = np.asarray(A_eq, float).reshape(-1, n)
    b_eq = np.asarray(b_eq, float).reshape(-1)
    G, h = _merge_rows(np.asarray(G, float).reshape(-1, n), np.asarray(h, float).reshape(-1))
    x = np.asarray(x0, float).copy()
    scale = max(1.0, float(np.max(np.abs(h))) if h.size else 1.0, float(np.max(np.abs(c))), float(np.max(np.abs(x))))
    feas_tol = 1e-7 * scale
    if A_eq.size and np.max(np.abs(A_eq @ x - b_eq)) > feas_tol:
        raise SolverFailure("starting point violates the equality constraints")
    if G.size and np.min(G @ x - h) < -feas_tol:
        raise SolverFailure("starting point violates an inequality constraint")

    eq_rows = [r for r in A_eq]
    work: list[int] = []
    rows = list(eq_rows)
    for i in np.argsort(np.abs(G @ x - h)) if G.size else []:
        if abs(G[i] @ x - h[i]) <= feas_tol and _independent(rows, G[i]):
            work.append(int(i))
            rows.append(G[i])

    for _ in range(max_iter):
        W = np.vstack(rows) if rows else np.zeros((0, n))
        p = -_null_projector(W, n) @ (x - c)
        pn = float(np.linalg.norm(p))
        if pn <= tol * scale:
            grad = 2.0 * (x - c)
            if W.shape[0] == 0:
                return x
            lam, *_ = np.linalg.lstsq(W.T, grad, rcond=None)
            ineq = lam[len(eq_rows):]
            if ineq.size == 0 or ineq.min() >= -tol * scale:
                return x
            k = int(np.argmin(ineq))
            del work[k]
            del rows[len(eq_rows) + k]
            continue
        alpha, block = 1.0, None
        if G.size:
            gp = G @ p
            slack = G @ x - h
            for i in range(G.shape[0]):
                # rows spanned by the working set have G p = 0 up to roundoff
                if i in work or gp[i] >= -1e-12 * pn:
                    continue
                step = max(slack[i], 0.0) / -gp[i]
                if step < alpha - 1e-15 or (block is not None and abs(step - alpha) <= 1e-15 and i < block):
                    alpha, block = step, i
        x = x + alpha * p
        if block is not None and _independent(rows, G[block]):
            work.append(block)
            rows.append(G[block])
    raise SolverFailure("active-set projection did not converge")
