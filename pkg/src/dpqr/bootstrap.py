"""Private multiplier bootstrap for simultaneous intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Dataset, ShardPlan
from .inference import DebiasedEstimate, IntervalReport, machine_gradients, score_terms
from .privacy import BudgetLedger, PrivacyBudget, PrivacyError, RngStream, noisy_hard_threshold, split_budget


@dataclass(frozen=True)
class BootstrapConfig:
    """Bootstrap settings.

    split : "per_replicate" gives every replicate eps/n_B so the total is
        eps; "full" gives each replicate the whole budget (the ledger then
        reports the overrun).
    sensitivity : "clipped" clips the raw statistic to [-B3/2, B3/2] before
        selection so B3 bounds its sup-norm change; "assumed" does not clip.
    variant : "auto" picks k-grad when m >= m0, else (n+m-1)-grad.
    ci_form : "symmetric" uses beta~ +- c(1-alpha)/sqrt(N); "quantile_pair" uses
        [beta~ - c(1-alpha/2)/sqrt(N), beta~ - c(alpha/2)/sqrt(N)].
    """

    replicates: int = 2000
    m0: int = 30
    alpha: float = 0.05
    budget: PrivacyBudget | None = None
    B3: float = 10.0
    split: str = "per_replicate"
    sensitivity: str = "clipped"
    variant: str = "auto"
    ci_form: str = "symmetric"
    dp_enabled: bool = True

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("need at least one bootstrap replicate")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.split not in ("per_replicate", "full"):
            raise ValueError("split must be 'per_replicate' or 'full'")
        if self.sensitivity not in ("clipped", "assumed"):
            raise ValueError("sensitivity must be 'clipped' or 'assumed'")
        if self.variant not in ("auto", "kgrad", "nk1grad"):
            raise ValueError("variant must be 'auto', 'kgrad' or 'nk1grad'")
        if self.ci_form not in ("symmetric", "quantile_pair"):
            raise ValueError("ci_form must be 'symmetric' or 'quantile_pair'")
        if self.dp_enabled and self.budget is None:
            raise ValueError("a budget is required when dp_enabled")

    def pick_variant(self, m: int) -> str:
        if self.variant != "auto":
            return self.variant
        return "kgrad" if m >= self.m0 else "nk1grad"


@dataclass
class BootstrapQuantiles:
    q_low: float
    q_high: float
    q_sup: float
    statistic_samples: np.ndarray
    variant: str = ""
    alpha: float = 0.05

    def __post_init__(self):
        assert self.q_low <= self.q_high


def order_statistic(samples, level: float) -> float:
    """Inverse of the empirical CDF: the ceil(level * B)-th smallest sample."""
    x = np.sort(np.asarray(samples, dtype=float))
    k = max(int(math.ceil(level * x.size - 1e-12)), 1)
    return float(x[k - 1])


def kgrad_statistic(W, grads, xi, n: int) -> np.ndarray:
    """W (1/sqrt(m)) sum_j xi_j sqrt(n) (g_j - g_bar).

    ``xi`` may be (m,) or (R, m); the result is (p+1,) or (R, p+1).
    """
    G = np.asarray(grads, dtype=float)
    m = G.shape[0]
    if m < 2:
        raise ValueError("k-grad needs at least two machines")
    Wm = np.asarray(getattr(W, "W", W), dtype=float)
    C = (G - G.mean(axis=0)) * math.sqrt(n) / math.sqrt(m)
    return (np.asarray(xi, dtype=float) @ C) @ Wm.T


def nk1grad_statistic(W, central_terms, machine_grads, xi, n: int | None = None, g_bar=None) -> np.ndarray:
    """W / sqrt(n+m-1) { sum_i xi_i (g_1i - g_bar) + sum_j xi_{n+j-1} sqrt(n) (g_j - g_bar) }.

    ``central_terms`` are the n per-sample gradients of machine 1 and
    ``machine_grads`` the m-1 averaged gradients of the other machines.
    ``g_bar`` defaults to the global mean gradient.
    """
    C1 = np.atleast_2d(np.asarray(central_terms, dtype=float))
    n = C1.shape[0] if n is None else n
    Gm = np.asarray(machine_grads, dtype=float).reshape(-1, C1.shape[1])
    if g_bar is None:
        g_bar = (C1.mean(axis=0) + Gm.sum(axis=0)) / (1 + Gm.shape[0])
    Wm = np.asarray(getattr(W, "W", W), dtype=float)
    rows = np.vstack([C1 - g_bar, math.sqrt(n) * (Gm - g_bar)]) / math.sqrt(C1.shape[0] + Gm.shape[0])
    return (np.asarray(xi, dtype=float) @ rows) @ Wm.T


def private_bootstrap(data: Dataset, plan: ShardPlan, beta_T0, W, cfg: BootstrapConfig, rng: RngStream,
                      tau: float, ledger: BudgetLedger | None = None, machine_grads=None,
                      variant: str | None = None, keep_raw: bool = False) -> BootstrapQuantiles:
    """Quantiles of the sup norm of privately selected bootstrap statistics.

    Replicate r draws its multipliers from ``rng.child(r, 0)`` and its
    selection noise from ``rng.child(r, 1)``, so results are reproducible
    given the data and the seed.
    """
    b = np.asarray(getattr(beta_T0, "values", beta_T0), dtype=float)
    variant = variant or cfg.pick_variant(plan.m)
    n, m = plan.n, plan.m
    if machine_grads is None:
        machine_grads = machine_gradients(data, plan, b, tau)
    central = None
    if variant == "nk1grad":
        idx = plan.assignments[0]
        central = score_terms(data.X[idx], data.y[idx], b, tau)
    g_bar = machine_grads.mean(axis=0)

    B = cfg.replicates
    if cfg.dp_enabled:
        rep_budget = split_budget(cfg.budget, B)[0] if cfg.split == "per_replicate" else cfg.budget
    d = b.size
    out = np.empty(B)
    raw = np.empty(B) if keep_raw else None
    for r in range(B):
        if variant == "kgrad":
            xi = rng.child(r, 0).normal(m)
            stat = kgrad_statistic(W, machine_grads, xi, n)
        else:
            xi = rng.child(r, 0).normal(n + m - 1)
            stat = nk1grad_statistic(W, central, machine_grads[1:], xi, n, g_bar)
        if keep_raw:
            raw[r] = np.max(np.abs(stat))
        if cfg.dp_enabled:
            if cfg.sensitivity == "clipped":
                stat = np.clip(stat, -cfg.B3 / 2, cfg.B3 / 2)
            sel = noisy_hard_threshold(stat, 1, rep_budget, cfg.B3, rng.child(r, 1), ledger=ledger,
                                       label="bootstrap")
        else:
            sel = noisy_hard_threshold(stat, 1, None, 0.0, None)
        out[r] = np.abs(sel).sum()
    q = BootstrapQuantiles(order_statistic(out, cfg.alpha / 2), order_statistic(out, 1 - cfg.alpha / 2),
                           order_statistic(out, 1 - cfg.alpha), out, variant, cfg.alpha)
    if keep_raw:
        q.raw_sup = raw
    return q


def simultaneous_cis(est: DebiasedEstimate, q: BootstrapQuantiles, N: int, form: str = "symmetric",
                     beta_true=None) -> list[IntervalReport]:
    vals = np.asarray(getattr(est, "values", est), dtype=float)
    rootN = math.sqrt(N)
    if form == "symmetric":
        lo, hi = vals - q.q_sup / rootN, vals + q.q_sup / rootN
    elif form == "quantile_pair":
        lo, hi = vals - q.q_high / rootN, vals - q.q_low / rootN
    else:
        raise ValueError("form must be 'symmetric' or 'quantile_pair'")
    out = []
    for j in range(vals.size):
        cov = None if beta_true is None else bool(lo[j] <= beta_true[j] <= hi[j])
        out.append(IntervalReport(j, float(lo[j]), float(hi[j]), 1 - q.alpha, float(q.q_sup), "bootstrap", cov))
    return out
