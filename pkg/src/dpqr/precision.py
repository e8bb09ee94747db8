"""Private pseudo precision matrix: noisy kernel-weighted Gram plus CLIME."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Dataset
from .lp import linprog
from .privacy import BudgetLedger, PrivacyBudget, RngStream
from .quantile import KernelSpec, kernel_weight


@dataclass
class NoisyCovariance:
    matrix: np.ndarray
    noise_sigma: float
    bandwidth: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if not np.array_equal(self.matrix, self.matrix.T):
            raise ValueError("covariance must be exactly symmetric")


@dataclass
class PrecisionEstimate:
    """Symmetrised CLIME solution.

    ``violation`` is max |W_raw D - I| for the column solutions before
    symmetrisation, which is what the constraint controls;
    ``violation_symmetric`` is the same quantity for the returned W.
    """

    W: np.ndarray
    gamma: float
    violation: float
    violation_symmetric: float
    objective: str = "l1"
    W_raw: np.ndarray | None = field(default=None, repr=False)


class ClimeInfeasible(ValueError):
    def __init__(self, column: int, min_gamma: float, gamma: float):
        super().__init__(f"column {column} infeasible at gamma={gamma:.4g}; smallest feasible gamma is {min_gamma:.4g}")
        self.column = column
        self.min_gamma = min_gamma
        self.gamma = gamma


def pseudo_covariance(X, y, beta, kernel: KernelSpec) -> np.ndarray:
    """(1/n) sum H_b(e_i) x_i x_i' with e = y - X beta."""
    X = np.asarray(X, dtype=float)
    w = np.atleast_1d(kernel_weight(np.asarray(y) - X @ np.asarray(beta), kernel))
    D = (X * w[:, None]).T @ X / X.shape[0]
    return (D + D.T) / 2


def covariance_noise_sigma(n: int, p: int, kappa_u: float, budget: PrivacyBudget, B1: float = 1.0) -> float:
    var = B1 * math.log(2 * n * p * p) ** 2 * kappa_u ** 2 * math.log(1.25 / budget.delta) / (n * n * budget.epsilon ** 2)
    return math.sqrt(var)


def symmetric_gaussian(dim: int, sigma: float, rng: RngStream) -> np.ndarray:
    """Upper triangle (with diagonal) iid N(0, sigma^2), mirrored below."""
    iu = np.triu_indices(dim)
    G = np.zeros((dim, dim))
    G[iu] = sigma * rng.normal(iu[0].size)
    return G + np.triu(G, 1).T


def noisy_pseudo_covariance(central: Dataset, beta_prev, kernel: KernelSpec, budget: PrivacyBudget | None,
                            B1: float, rng: RngStream | None, ledger: BudgetLedger | None = None) -> NoisyCovariance:
    """Kernel-weighted Gram on the central shard plus symmetric Gaussian noise.

    ``budget=None`` disables the noise (the non-private limit).
    """
    beta_prev = getattr(beta_prev, "values", beta_prev)
    D = pseudo_covariance(central.X, central.y, beta_prev, kernel)
    if budget is None:
        return NoisyCovariance(D, 0.0, kernel.bandwidth)
    sigma = covariance_noise_sigma(central.N, max(central.p, 1), kernel.kappa_u, budget, B1)
    if ledger is not None:
        ledger.spend("precision", budget)
    return NoisyCovariance(D + symmetric_gaussian(D.shape[0], sigma, rng), sigma, kernel.bandwidth)


def choose_gamma(n: int, N: int, p: int, b: float, budget: PrivacyBudget | None, c_gamma: float = 0.5,
                 s: int | None = None) -> float:
    """Default CLIME slack; ``s`` is accepted for interface symmetry and unused."""
    lp = math.log(p)
    val = math.sqrt(lp / (n * b)) + lp / (n * b) + b * b
    if budget is not None:
        val += math.sqrt(lp ** (10 / 3) * math.log(1 / budget.delta) * n ** (2 / 3) / (N * N * budget.epsilon ** 2))
    return c_gamma * val


def _column_lp(D, j, gamma, objective):
    P = D.shape[0]
    e = np.zeros(P)
    e[j] = 1.0
    A = np.block([[D, -D], [-D, D]])
    b = np.concatenate([gamma + e, gamma - e])
    if objective == "l1":
        res = linprog(np.ones(2 * P), A_ub=A, b_ub=b)
        x = res.x
    else:
        # min t with |w_i| <= u_i + v_i <= t
        A2 = np.vstack([np.hstack([A, np.zeros((2 * P, 1))]),
                        np.hstack([np.eye(P), np.eye(P), -np.ones((P, 1))])])
        b2 = np.concatenate([b, np.zeros(P)])
        c = np.zeros(2 * P + 1)
        c[-1] = 1.0
        res = linprog(c, A_ub=A2, b_ub=b2)
        x = res.x[:2 * P]
    return x[:P] - x[P:], res


def min_feasible_gamma(D, j) -> float:
    """min over w of ||D w - e_j||_inf, via an LP in (u, v, t)."""
    P = D.shape[0]
    e = np.zeros(P)
    e[j] = 1.0
    one = np.ones((P, 1))
    A = np.block([[D, -D, -one], [-D, D, -one]])
    b = np.concatenate([e, -e])
    c = np.zeros(2 * P + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=A, b_ub=b)
    return float(res.x[-1])


def clime_solve(D, gamma: float, objective: str = "l1", tol: float = 1e-9) -> PrecisionEstimate:
    """Column-wise CLIME: min ||w||_1 (or ||w||_inf) s.t. ||D w - e_j||_inf <= gamma.

    Raises :class:`ClimeInfeasible` naming the first column that has no
    feasible point, together with the smallest gamma that would admit one.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if objective not in ("l1", "linf"):
        raise ValueError("objective must be 'l1' or 'linf'")
    D = np.asarray(getattr(D, "matrix", D), dtype=float)
    P = D.shape[0]
    W = np.zeros((P, P))
    for j in range(P):
        w, res = _column_lp(D, j, gamma, objective)
        viol = np.max(np.abs(D @ w - np.eye(P)[j]))
        if not res.success or viol > gamma + 1e-6:
            mg = min_feasible_gamma(D, j)
            if mg > gamma:
                raise ClimeInfeasible(j, mg, gamma)
            raise RuntimeError(f"column {j}: LP solver failed ({res.status})")
        W[j] = w
    I = np.eye(P)
    viol = float(np.max(np.abs(W @ D - I)))
    Ws = (W + W.T) / 2
    return PrecisionEstimate(Ws, gamma, viol, float(np.max(np.abs(Ws @ D - I))), objective, W)


def clime_solve_adaptive(D, gamma: float, objective: str = "l1", grow: float = 1.1,
                         max_tries: int = 20) -> PrecisionEstimate:
    """clime_solve, enlarging gamma past any reported infeasibility."""
    for _ in range(max_tries):
        try:
            return clime_solve(D, gamma, objective)
        except ClimeInfeasible as exc:
            gamma = max(gamma * grow, exc.min_gamma * grow)
    return clime_solve(D, gamma, objective)
