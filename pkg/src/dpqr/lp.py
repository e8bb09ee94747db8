"""Dense primal-dual interior-point solver for small linear programs.

Standard form: minimize c'x subject to A x = b, x >= 0.  Mehrotra's
predictor-corrector with normal equations solved by Cholesky.  Problems
here are at most a few thousand variables so everything is dense.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    status: str  # "optimal", "infeasible", "maxiter"
    iterations: int
    primal_residual: float
    dual_residual: float
    gap: float

    @property
    def success(self) -> bool:
        return self.status == "optimal"


def _factor(M):
    """Cholesky factor of M, with a small diagonal shift if M is numerically singular."""
    try:
        return linalg.cho_factor(M, check_finite=False)
    except linalg.LinAlgError:
        pass
    shift = 1e-14 * max(np.trace(M) / len(M), 1.0)
    for _ in range(8):
        try:
            return linalg.cho_factor(M + shift * np.eye(len(M)), check_finite=False)
        except linalg.LinAlgError:
            shift *= 100
    return None


def _solve_normal(M, rhs, fac=None, refine: int = 2):
    fac = _factor(M) if fac is None else fac
    if fac is None:
        return np.linalg.lstsq(M, rhs, rcond=None)[0]
    x = linalg.cho_solve(fac, rhs, check_finite=False)
    for _ in range(refine):
        x = x + linalg.cho_solve(fac, rhs - M @ x, check_finite=False)
    return x


def _polish(A, b, x, s):
    """Solve A_B x_B = b on the apparent basis; None unless the vertex is feasible.

    Near the optimum x/s splits into huge (basic) and tiny (nonbasic)
    values; degenerate vertices have fewer than m basic columns, so the
    split x/s > 1 is tried before the m largest ratios.
    """
    m = A.shape[0]
    r = x / s
    scale = 1.0 + np.linalg.norm(b)
    for B in (np.flatnonzero(r > 1.0), np.argsort(-r)[:m]):
        if B.size == 0 or B.size > m:
            continue
        xb = np.linalg.lstsq(A[:, B], b, rcond=None)[0]
        if np.min(xb) < -1e-12 * scale:
            continue
        out = np.zeros_like(x)
        out[B] = np.maximum(xb, 0.0)
        if np.linalg.norm(A @ out - b) <= 1e-11 * scale:
            return out
    return None


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def solve_standard(c, A, b, tol: float = 1e-10, max_iter: int = 200, accept_tol: float = 1e-8,
                   patience: int = 10, polish_tol: float = 1e-4) -> LPResult:
    """Mehrotra predictor-corrector.

    The best iterate (by the largest of the relative primal residual, dual
    residual and gap) is kept.  Late in a degenerate solve the normal
    equations get ill-conditioned and iterates can drift; once the best
    iterate meets ``accept_tol``, a stall of ``patience`` iterations or a
    jump in the residuals ends the run and the best iterate is returned.
    If the run stalls short of ``accept_tol``, the basis read off the best
    iterate is solved exactly and kept when it is feasible with a small gap.
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape

    # Mehrotra's starting point
    AAT = A @ A.T
    x = A.T @ _solve_normal(AAT, b)
    y = _solve_normal(AAT, A @ c)
    s = c - A.T @ y
    x = x + max(-1.5 * x.min(), 0.0)
    s = s + max(-1.5 * s.min(), 0.0)
    xs = x @ s
    x = x + 0.5 * xs / max(s.sum(), 1e-300) + 1e-8
    s = s + 0.5 * xs / max(x.sum(), 1e-300) + 1e-8

    bnorm, cnorm = 1.0 + np.linalg.norm(b), 1.0 + np.linalg.norm(c)
    status = "maxiter"
    it = 0
    best, best_merit, best_it = (x, y, s), np.inf, 0
    for it in range(1, max_iter + 1):
        rb = A @ x - b
        rc = A.T @ y + s - c
        mu = x @ s / n
        pres, dres = np.linalg.norm(rb) / bnorm, np.linalg.norm(rc) / cnorm
        pobj, dobj = c @ x, b @ y
        gap = abs(pobj - dobj) / (1.0 + abs(pobj))
        merit = max(pres, dres, gap)
        if merit < best_merit:
            best, best_merit, best_it = (x, y, s), merit, it
        if merit < tol:
            status = "optimal"
            break
        if np.max(x) > 1e14 or np.max(np.abs(y)) > 1e14:
            status = "infeasible"
            break
        if best_merit < accept_tol and (it - best_it > patience or merit > 1e3 * best_merit):
            break
        if mu < 1e-30:
            break

        d = x / s
        M = (A * d) @ A.T
        fac = _factor(M)

        def direction(rxs):
            dy = _solve_normal(M, -rb - A @ ((rxs + x * rc) / s), fac)
            ds = -rc - A.T @ dy
            dx = (rxs - x * ds) / s
            return dx, dy, ds

        dx, dy, ds = direction(-x * s)
        ap, ad = min(1.0, _max_step(x, dx)), min(1.0, _max_step(s, ds))
        mu_aff = (x + ap * dx) @ (s + ad * ds) / n
        sigma = (mu_aff / mu) ** 3
        # keep complementarity from collapsing while the primal residual lags;
        # otherwise degenerate problems lose the residual to round-off
        sigma = max(sigma, min(0.1, 1e-2 * pres / max(mu, 1e-300)))
        dx, dy, ds = direction(-x * s - dx * ds + sigma * mu)
        ap = min(1.0, 0.99995 * _max_step(x, dx))
        ad = min(1.0, 0.99995 * _max_step(s, ds))
        x = x + ap * dx
        y = y + ad * dy
        s = s + ad * ds
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            status = "infeasible"
            break
    if status != "optimal" and best_merit < accept_tol:
        (x, y, s), status = best, "optimal"
    if status != "optimal" and best_merit < polish_tol:
        # degenerate problems can stall just short of tolerance; try the
        # vertex suggested by the best iterate
        xb, yb, sb = best
        xp = _polish(A, b, xb, sb)
        if xp is not None:
            gap = (c @ xp - b @ yb) / (1.0 + abs(c @ xp))
            dres = np.linalg.norm(A.T @ yb + sb - c) / cnorm
            if abs(gap) < accept_tol and dres < accept_tol:
                x, y, s, status = xp, yb, sb, "optimal"
    rb = A @ x - b
    rc = A.T @ y + s - c
    return LPResult(x=x, fun=float(c @ x), status=status, iterations=it,
                    primal_residual=float(np.linalg.norm(rb) / bnorm),
                    dual_residual=float(np.linalg.norm(rc) / cnorm),
                    gap=float(abs(c @ x - b @ y) / (1.0 + abs(c @ x))))


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, **options) -> LPResult:
    """minimize c'x s.t. A_ub x <= b_ub, A_eq x = b_eq, x >= 0.

    Inequalities get slack columns; the returned x drops them.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    blocks, rhs = [], []
    k = 0
    if A_ub is not None:
        A_ub = np.atleast_2d(np.asarray(A_ub, dtype=float))
        k = A_ub.shape[0]
        blocks.append(np.hstack([A_ub, np.eye(k)]))
        rhs.append(np.asarray(b_ub, dtype=float))
    if A_eq is not None:
        A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
        blocks.append(np.hstack([A_eq, np.zeros((A_eq.shape[0], k))]))
        rhs.append(np.asarray(b_eq, dtype=float))
    if not blocks:
        raise ValueError("no constraints")
    res = solve_standard(np.concatenate([c, np.zeros(k)]), np.vstack(blocks), np.concatenate(rhs),
                         **options)
    res.x = res.x[:n]
    res.fun = float(c @ res.x)
    return res
