"""Debiased estimator and coordinate-wise private confidence intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .engine import Dataset, ShardPlan
from .privacy import BudgetLedger, PrivacyBudget, RngStream


@dataclass
class DebiasedEstimate:
    values: np.ndarray
    dp_noise_sigma: float
    source_round: int
    correction: np.ndarray | None = None
    machine_grads: np.ndarray | None = None  # (m, p+1), reused by the bootstrap


@dataclass
class IntervalReport:
    j: int
    lower: float
    upper: float
    level: float
    sigma_hat: float
    method: str = "normal"
    covered: bool | None = None

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError("lower must not exceed upper")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")

    @property
    def width(self) -> float:
        return self.upper - self.lower


def score_terms(X, y, beta, tau: float) -> np.ndarray:
    """Per-sample (1{y - x'beta <= 0} - tau) x."""
    r = (np.asarray(y) - np.asarray(X) @ np.asarray(beta) <= 0) - tau
    return np.asarray(X) * r[:, None]


def machine_gradients(data: Dataset, plan: ShardPlan, beta, tau: float) -> np.ndarray:
    """g_k = (1/n) sum over shard k of the score terms; one row per machine."""
    beta = np.asarray(getattr(beta, "values", beta), dtype=float)
    return np.vstack([score_terms(data.X[idx], data.y[idx], beta, tau).mean(axis=0)
                      for idx in plan.assignments])


def debias_noise_sigma(n: int, m: int, budget: PrivacyBudget, B2: float = 1.0) -> float:
    return math.sqrt(B2 * B2 * math.log(1.25 / budget.delta)) / (n * m * budget.epsilon)


def debias(beta_T0, W, data: Dataset, plan: ShardPlan, tau: float, budget: PrivacyBudget | None,
           B2: float = 1.0, rng: RngStream | None = None, ledger: BudgetLedger | None = None,
           source_round: int = 0, sign: str = "newton") -> DebiasedEstimate:
    """One-step correction of a sparse estimate plus Gaussian noise.

    Parameters
    ----------
    beta_T0 : SparseEstimate or array
    W : PrecisionEstimate or array
    tau : float
    budget : PrivacyBudget or None
        None switches the Gaussian noise off.
    sign : {"newton", "plus"}
        ``"newton"`` subtracts W g_bar, the Newton direction for the check
        loss (E[g_bar] is about H (beta_hat - beta*)).  ``"plus"`` adds it.
    """
    b = np.asarray(getattr(beta_T0, "values", beta_T0), dtype=float)
    Wm = np.asarray(getattr(W, "W", W), dtype=float)
    if Wm.shape != (b.size, b.size) or data.X.shape[1] != b.size:
        raise ValueError("dimension mismatch between W, beta and data")
    if sign not in ("newton", "plus"):
        raise ValueError("sign must be 'newton' or 'plus'")
    G = machine_gradients(data, plan, b, tau)
    corr = Wm @ G.mean(axis=0)
    vals = b - corr if sign == "newton" else b + corr
    sigma = 0.0
    if budget is not None:
        sigma = debias_noise_sigma(plan.n, plan.m, budget, B2)
        if ledger is not None:
            ledger.spend("debias", budget)
        if sigma > 0:
            vals = vals + sigma * rng.normal(b.size)
    return DebiasedEstimate(vals, sigma, source_round, corr, G)


def machine_sigma_hats(W, data: Dataset, plan: ShardPlan) -> np.ndarray:
    """sigma_j^(k) = w_j' Sigma_k w_j with Sigma_k the raw local Gram; shape (m, p+1)."""
    Wm = np.asarray(getattr(W, "W", W), dtype=float)
    out = []
    for idx in plan.assignments:
        Z = data.X[idx] @ Wm.T
        out.append(np.einsum("ij,ij->j", Z, Z) / len(idx))
    S = np.vstack(out)
    assert np.all(S >= 0)
    return S


def _privacy_term(N: int, budget: PrivacyBudget | None, B2: float) -> float:
    if budget is None:
        return 0.0
    return 8 * B2 * B2 * math.log(1 / budget.delta) / (N * budget.epsilon ** 2)


def half_widths(sigma_hats, N: int, alpha: float, tau: float, budget: PrivacyBudget | None,
                B2: float = 1.0) -> np.ndarray:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = stats.norm.ppf(1 - alpha / 2)
    s = np.asarray(sigma_hats).mean(axis=0)
    return z * math.sqrt(tau * (1 - tau)) / math.sqrt(N) * np.sqrt(s + _privacy_term(N, budget, B2))


def coordinate_ci(est: DebiasedEstimate, W, plan: ShardPlan, data: Dataset, j: int, alpha: float,
                  tau: float, budget: PrivacyBudget | None, B2: float = 1.0, sigma_hats=None,
                  beta_true=None) -> IntervalReport:
    if not 0 <= j < est.values.size:
        raise IndexError(f"coordinate {j} out of range")
    if sigma_hats is None:
        sigma_hats = machine_sigma_hats(W, data, plan)
    hw = half_widths(sigma_hats, plan.N, alpha, tau, budget, B2)[j]
    c = est.values[j]
    covered = None if beta_true is None else bool(c - hw <= beta_true[j] <= c + hw)
    return IntervalReport(j, c - hw, c + hw, 1 - alpha, float(np.mean(np.asarray(sigma_hats)[:, j])),
                          "normal", covered)


def all_coordinate_cis(est, W, plan, data, alpha, tau, budget, B2=1.0, beta_true=None):
    S = machine_sigma_hats(W, data, plan)
    return [coordinate_ci(est, W, plan, data, j, alpha, tau, budget, B2, S, beta_true)
            for j in range(est.values.size)]


def standardized_statistic(est: DebiasedEstimate, W, plan: ShardPlan, data: Dataset, j: int, tau: float,
                           budget: PrivacyBudget | None, beta_true_j: float, B2: float = 1.0,
                           sigma_hats=None, tau_factor: bool = True) -> float:
    """sqrt(N)(beta~_j - beta*_j) over its estimated standard deviation.

    With ``tau_factor`` the denominator includes sqrt(tau (1 - tau)), which
    is the scale the coordinate intervals use.
    """
    if sigma_hats is None:
        sigma_hats = machine_sigma_hats(W, data, plan)
    N = plan.N
    s = float(np.mean(np.asarray(sigma_hats)[:, j])) + _privacy_term(N, budget, B2)
    scale = math.sqrt(tau * (1 - tau)) if tau_factor else 1.0
    return math.sqrt(N) * (est.values[j] - beta_true_j) / (scale * math.sqrt(s))
