"""Simulated trusted-coordinator runtime and the private sparse estimation driver.

Workers hold their shard and send serialized gradient messages; the
coordinator (which is also machine 0) averages them, takes a step, privatizes
with NoisyHT and broadcasts the sparse iterate.  Gradients sent upstream are
not privatized: the coordinator is trusted, only what it broadcasts is.
"""
from __future__ import annotations

import math
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .lp import solve_standard
from .privacy import (BudgetLedger, PrivacyBudget, PrivacyError, RngStream, noisy_hard_threshold,
                      peeling_scale, split_budget, truncate)
from .quantile import KernelSpec, QuantileSpec, check_loss, clipped_gradient_sum, default_bandwidth, pseudo_arrays


class EstimationError(RuntimeError):
    def __init__(self, msg, traces=None):
        super().__init__(msg)
        self.traces = traces or []


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float).ravel()
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ValueError("X must be a nonempty 2-d array")
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y have different numbers of rows")
        if not np.all(self.X[:, 0] == 1.0):
            raise ValueError("column 0 of X must be the intercept (all ones)")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        """Number of covariates, excluding the intercept."""
        return self.X.shape[1] - 1

    def rows(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


@dataclass
class ShardPlan:
    m: int
    assignments: list

    def __post_init__(self):
        sizes = {len(a) for a in self.assignments}
        if len(self.assignments) != self.m or len(sizes) != 1:
            raise ValueError("shards must be m blocks of equal size")

    @property
    def n(self) -> int:
        return len(self.assignments[0])

    @property
    def N(self) -> int:
        return self.n * self.m


def partition(data: Dataset, m: int, rng: RngStream) -> ShardPlan:
    """Random permutation followed by contiguous equal blocks; block 0 is the central machine."""
    if m < 1 or data.N % m != 0:
        raise ValueError(f"N={data.N} is not divisible by m={m}")
    perm = rng.permutation(data.N)
    n = data.N // m
    return ShardPlan(m, [np.sort(perm[j * n:(j + 1) * n]) for j in range(m)])


@dataclass(frozen=True)
class EstimationConfig:
    """Inputs of the private estimation loop.

    ``kernel=None`` means a gaussian kernel with bandwidth 0.5 (log p / N)^(1/3).
    ``sensitivity="clipped"`` clips every per-sample gradient term entrywise at
    B0 so the NoisyHT calibration holds for any data; ``"assumed"`` skips the
    clip and trusts B0 as a bound.  ``free_intercept`` keeps coordinate 0 out
    of the peeling (it is still released with noise) and ``sparsity`` then
    counts slope coordinates only.
    """

    quantile: QuantileSpec = QuantileSpec(0.5)
    kernel: KernelSpec | None = None
    sparsity: int = 5
    outer_iters: int = 10
    inner_iters: int = 10
    eta: float = 0.1
    C1: float = 10.0
    B0: float = 5.0
    budget: PrivacyBudget | None = None
    dp_enabled: bool = True
    sensitivity: str = "clipped"
    free_intercept: bool = True
    loss: str = "quantile"
    init: str = "l1qr"
    init_outer: int = 5
    init_inner: int = 10
    init_max_rows: int = 500
    step_rule: str = "fixed"
    threads: int = 1

    def __post_init__(self):
        if self.sparsity < 1 or self.outer_iters < 1 or self.inner_iters < 1:
            raise ValueError("sparsity, outer_iters and inner_iters must be >= 1")
        if not (self.eta > 0 and self.C1 > 0 and self.B0 > 0):
            raise ValueError("eta, C1 and B0 must be positive")
        if self.sensitivity not in ("clipped", "assumed"):
            raise ValueError("sensitivity must be 'clipped' or 'assumed'")
        if self.loss not in ("quantile", "least_squares"):
            raise ValueError("loss must be 'quantile' or 'least_squares'")
        if self.init not in ("l1qr", "zero"):
            raise ValueError("init must be 'l1qr' or 'zero'")
        if self.step_rule not in ("fixed", "auto"):
            raise ValueError("step_rule must be 'fixed' or 'auto'")
        if self.dp_enabled and self.budget is None:
            raise ValueError("a privacy budget is required when dp_enabled")

    def kernel_for(self, p: int, N: int) -> KernelSpec:
        if self.kernel is not None:
            return self.kernel
        return KernelSpec("gaussian", default_bandwidth(p, N))

    @property
    def clip(self) -> float | None:
        return self.B0 if self.sensitivity == "clipped" else None


@dataclass
class SparseEstimate:
    values: np.ndarray
    support: tuple
    previous: np.ndarray | None = None  # iterate that built the last pseudo samples

    @classmethod
    def from_values(cls, values, previous=None) -> "SparseEstimate":
        values = np.asarray(values, dtype=float)
        return cls(values, tuple(int(i) for i in np.flatnonzero(values)), previous)


# -- messages ---------------------------------------------------------------

_HDR = struct.Struct("<IIII")


@dataclass
class GradientMessage:
    machine_id: int
    t: int
    k: int
    vector: np.ndarray

    def to_bytes(self) -> bytes:
        v = np.ascontiguousarray(self.vector, dtype="<f8")
        return _HDR.pack(self.machine_id, self.t, self.k, v.size) + v.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GradientMessage":
        mid, t, k, n = _HDR.unpack_from(raw)
        v = np.frombuffer(raw, dtype="<f8", count=n, offset=_HDR.size).astype(float)
        return cls(mid, t, k, v)


@dataclass
class BroadcastMessage:
    t: int
    k: int
    length: int
    indices: np.ndarray
    values: np.ndarray

    def to_bytes(self) -> bytes:
        idx = np.ascontiguousarray(self.indices, dtype="<i8")
        val = np.ascontiguousarray(self.values, dtype="<f8")
        return _HDR.pack(self.t, self.k, idx.size, self.length) + idx.tobytes() + val.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BroadcastMessage":
        t, k, c, length = _HDR.unpack_from(raw)
        idx = np.frombuffer(raw, dtype="<i8", count=c, offset=_HDR.size).astype(int)
        val = np.frombuffer(raw, dtype="<f8", count=c, offset=_HDR.size + 8 * c).astype(float)
        return cls(t, k, length, idx, val)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.length)
        out[self.indices] = self.values
        return out


@dataclass
class RoundTrace:
    t: int
    k: int
    message_sizes: list
    broadcast_size: int
    update: np.ndarray
    support: tuple
    noise_scale: float

    @property
    def messages(self) -> int:
        return len(self.message_sizes) + 1


class AccessLog:
    """Ordered record of who touched what; used to audit post-processing."""

    def __init__(self):
        self.events: list[tuple] = []
        self._lock = threading.Lock()

    def add(self, *event):
        with self._lock:
            self.events.append(tuple(event))


# -- actors -----------------------------------------------------------------

class Worker:
    def __init__(self, machine_id: int, shard: Dataset, log: AccessLog | None = None):
        self.machine_id = machine_id
        self._shard = shard
        self._log = log
        self._Xt = None
        self._yt = None

    @property
    def n(self) -> int:
        return self._shard.N

    def refresh(self, beta, t: int, cfg: EstimationConfig, kernel: KernelSpec):
        """Rebuild pseudo samples around ``beta``."""
        if self._log is not None:
            self._log.add("worker", self.machine_id, "read_shard", t, 0)
        if cfg.loss == "least_squares":
            self._Xt, self._yt = self._shard.X, self._shard.y
        else:
            self._Xt, self._yt, _, _ = pseudo_arrays(self._shard.X, self._shard.y, beta, kernel, cfg.quantile)

    def gradient(self, beta, t: int, k: int, clip: float | None) -> bytes:
        if self._log is not None:
            self._log.add("worker", self.machine_id, "gradient", t, k)
        nz = np.flatnonzero(beta)
        r = self._Xt[:, nz] @ beta[nz] - self._yt
        g = clipped_gradient_sum(self._Xt, r, clip) / self.n
        return GradientMessage(self.machine_id, t, k, g).to_bytes()

    def pseudo_gram_top_eig(self) -> float:
        G = self._Xt.T @ self._Xt / self.n
        return float(np.linalg.eigvalsh(G)[-1])


class Coordinator:
    """Holds no data: it only sees gradient messages."""

    def __init__(self, m: int, n: int, length: int, cfg: EstimationConfig, rng: RngStream | None,
                 ledger: BudgetLedger | None, log: AccessLog | None = None):
        self.m, self.n, self.length = m, n, length
        self.cfg = cfg
        self.rng = rng
        self.ledger = ledger
        self.log = log
        self.eta = cfg.eta
        kt = cfg.outer_iters * cfg.inner_iters
        if cfg.dp_enabled:
            self.call_budget = split_budget(cfg.budget, m * kt)[0]
            self.lam = self.eta * cfg.B0 / (m * n)
        else:
            self.call_budget = None
            self.lam = 0.0
        self.calls = 0

    def set_eta(self, eta: float):
        self.eta = eta
        if self.cfg.dp_enabled:
            self.lam = eta * self.cfg.B0 / (self.m * self.n)

    @property
    def forced(self):
        return (0,) if self.cfg.free_intercept else ()

    @property
    def noise_scale(self) -> float:
        if not self.cfg.dp_enabled:
            return 0.0
        return peeling_scale(self.lam, self.cfg.sparsity + len(self.forced), self.call_budget)

    def step(self, beta, raw_messages: list[bytes], t: int, k: int):
        msgs = [GradientMessage.from_bytes(r) for r in raw_messages]
        if sorted(x.machine_id for x in msgs) != list(range(self.m)):
            raise EstimationError("missing or duplicate gradient messages")
        total = np.zeros(self.length)
        for msg in sorted(msgs, key=lambda x: x.machine_id):  # fixed reduction order
            if (msg.t, msg.k) != (t, k):
                raise EstimationError("stale gradient message")
            total += msg.vector
        half = beta - (self.eta / self.m) * total
        if not np.all(np.isfinite(half)):
            raise EstimationError(f"non-finite update at t={t}, k={k}")
        if self.log is not None:
            self.log.add("coordinator", 0, "noisy_ht", t, k)
        s = min(self.cfg.sparsity, self.length - len(self.forced))
        if self.cfg.dp_enabled:
            kt = self.cfg.outer_iters * self.cfg.inner_iters
            if self.calls >= kt:
                raise PrivacyError("privacy budget exhausted")
            new = noisy_hard_threshold(half, s, self.call_budget, self.lam, self.rng, forced=self.forced,
                                       ledger=self.ledger, label="estimation")
            self.calls += 1
        else:
            new = noisy_hard_threshold(half, s, None, 0.0, None, forced=self.forced)
        new = truncate(new, self.cfg.C1)
        nz = np.flatnonzero(new)
        out = BroadcastMessage(t, k, self.length, nz, new[nz]).to_bytes()
        trace = RoundTrace(t, k, [len(r) for r in raw_messages], len(out), half,
                           tuple(int(i) for i in nz), self.noise_scale)
        return out, trace

    def close(self):
        """Report the share of the estimation budget that the calls did not draw."""
        if self.ledger is None or not self.cfg.dp_enabled:
            return
        e, d = self.cfg.budget.exact
        ce, cd = self.call_budget.exact
        self.ledger.release("estimation", e - ce * self.calls, d - cd * self.calls)


# -- initial estimate -------------------------------------------------------

def l1_quantile_regression(X, y, tau: float, lam: float, penalize_intercept: bool = False) -> np.ndarray:
    """argmin (1/n) sum rho_tau(y - X b) + lam * ||b_{1:}||_1 as a linear program."""
    n, d = X.shape
    pen = np.full(d, lam)
    if not penalize_intercept:
        # a tiny cost keeps the split parts of the free intercept bounded
        pen[0] = 1e-6 * lam
    c = np.concatenate([pen, pen, np.full(n, tau / n), np.full(n, (1 - tau) / n)])
    A = np.hstack([X, -X, np.eye(n), -np.eye(n)])
    res = solve_standard(c, A, y, tol=1e-9)
    if res.status != "optimal":
        raise np.linalg.LinAlgError(f"l1 quantile regression LP failed: {res.status}")
    return res.x[:d] - res.x[d:2 * d]


def _hard_threshold(v, s, forced):
    return noisy_hard_threshold(v, min(s, v.size - len(forced)), None, 0.0, None, forced=forced)


def initial_estimate(central: Dataset, cfg: EstimationConfig, kernel: KernelSpec | None = None) -> SparseEstimate:
    """Non-private sparse start computed on the central shard only.

    An l1-penalised fit (``init="l1qr"``) or zero is used as the start, then
    hard-thresholded transformed least-squares descent with step 1/lambda_max
    refines it.  The l1 fit uses at most ``cfg.init_max_rows`` rows of the
    shard (already a random subsample) to bound the LP size.  The local bandwidth defaults to 0.5 (log p / n)^(1/3).
    """
    X, y = central.X, central.y
    n, d = X.shape
    p = max(d - 1, 2)
    forced = (0,) if cfg.free_intercept else ()
    kernel = kernel or KernelSpec("gaussian", default_bandwidth(p, n))
    tau = cfg.quantile.tau
    beta = np.zeros(d)
    outer, inner = cfg.init_outer, cfg.init_inner
    if cfg.init == "l1qr":
        try:
            if cfg.loss == "quantile":
                r = min(n, cfg.init_max_rows)
                lam = math.sqrt(tau * (1 - tau) * math.log(p) / r)
                beta = l1_quantile_regression(X[:r], y[:r], tau, lam, penalize_intercept=not cfg.free_intercept)
            else:
                outer, inner = 1, cfg.init_outer * cfg.init_inner
        except np.linalg.LinAlgError:
            outer, inner = 2 * cfg.init_outer, cfg.init_inner
    else:
        outer = 2 * cfg.init_outer
    beta = truncate(_hard_threshold(beta, cfg.sparsity, forced), cfg.C1)
    best = _init_loss(X, y, beta, cfg)
    for _ in range(outer):
        if cfg.loss == "least_squares":
            Xt, yt = X, y
        else:
            Xt, yt, _, _ = pseudo_arrays(X, y, beta, kernel, cfg.quantile)
        G = Xt.T @ Xt / n
        top = float(np.linalg.eigvalsh(G)[-1])
        if not (np.isfinite(top) and top > 0):
            break
        step = 1.0 / top
        b_y = Xt.T @ yt / n
        cand = beta
        for _ in range(inner):
            cand = truncate(_hard_threshold(cand - step * (G @ cand - b_y), cfg.sparsity, forced), cfg.C1)
        # keep a round only if it lowers the empirical loss; the kernel
        # surrogate can drift badly when many residuals are exactly zero
        loss = _init_loss(X, y, cand, cfg)
        if not loss < best:
            break
        beta, best = cand, loss
    return SparseEstimate.from_values(beta)


def _init_loss(X, y, beta, cfg) -> float:
    r = y - X @ beta
    if cfg.loss == "least_squares":
        return float(np.mean(r * r))
    return float(np.mean(check_loss(r, cfg.quantile.tau)))


# -- driver -----------------------------------------------------------------

def dp_sparse_estimate(data: Dataset, plan: ShardPlan, cfg: EstimationConfig, rng: RngStream | None,
                       ledger: BudgetLedger | None = None, init: SparseEstimate | None = None,
                       log: AccessLog | None = None):
    """Private distributed sparse quantile regression.

    Parameters
    ----------
    data, plan : Dataset, ShardPlan
    cfg : EstimationConfig
    rng : RngStream
        Coordinator noise stream (unused when ``cfg.dp_enabled`` is False).
    ledger : BudgetLedger, optional
        Receives one entry per NoisyHT call plus the unspent remainder.
    init : SparseEstimate, optional
        Starting point; computed with :func:`initial_estimate` when omitted.

    Returns
    -------
    (SparseEstimate, list of RoundTrace)
    """
    m, n, d = plan.m, plan.n, data.X.shape[1]
    if plan.N != data.N:
        raise ValueError("plan does not match the dataset")
    kernel = cfg.kernel_for(max(data.p, 2), data.N)
    workers = [Worker(j, data.rows(plan.assignments[j]), log) for j in range(m)]
    coord = Coordinator(m, n, d, cfg, rng, ledger, log)
    if init is None:
        init = initial_estimate(data.rows(plan.assignments[0]), cfg)
    beta = np.asarray(init.values, dtype=float).copy()
    prev = beta.copy()
    traces: list[RoundTrace] = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(1, cfg.outer_iters + 1):
            prev = beta.copy()
            if pool is None:
                for w in workers:
                    w.refresh(prev, t, cfg, kernel)
            else:
                list(pool.map(lambda w: w.refresh(prev, t, cfg, kernel), workers))
            if cfg.step_rule == "auto":
                # 1/lambda_max of the refreshed central pseudo Gram, never growing:
                # far from the fit most kernel weights vanish and the Gram collapses
                step = 1.0 / workers[0].pseudo_gram_top_eig()
                coord.set_eta(step if t == 1 else min(coord.eta, step))
            for k in range(1, cfg.inner_iters + 1):
                if pool is None:
                    raw = [w.gradient(beta, t, k, cfg.clip) for w in workers]
                else:
                    raw = list(pool.map(lambda w: w.gradient(beta, t, k, cfg.clip), workers))
                try:
                    out, trace = coord.step(beta, raw, t, k)
                except EstimationError as exc:
                    exc.traces = traces
                    raise
                traces.append(trace)
                beta = BroadcastMessage.from_bytes(out).dense()
    finally:
        if pool is not None:
            pool.shutdown()
        coord.close()
    return SparseEstimate.from_values(beta, previous=prev), traces
