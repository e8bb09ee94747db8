from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog as scipy_linprog

from dpqr.designs import SimDesign, generate, replicate_stream
from dpqr.engine import (AccessLog, BroadcastMessage, Coordinator, Dataset, EstimationConfig, EstimationError,
                         GradientMessage, SparseEstimate, Worker, dp_sparse_estimate, initial_estimate,
                         l1_quantile_regression, partition)
from dpqr.privacy import BudgetLedger, PrivacyBudget, PrivacyError, RngStream
from dpqr.quantile import KernelSpec, QuantileSpec, pseudo_arrays


def small_data(N=400, p=20, seed=0, noise=1.0, beta=None):
    rng = np.random.default_rng(seed)
    X = np.hstack([np.ones((N, 1)), rng.standard_normal((N, p))])
    if beta is None:
        beta = np.zeros(p + 1)
        head = [1.0, 2.0, -1.5, 1.0][:p + 1]
        beta[:len(head)] = head
    y = X @ beta + noise * rng.standard_normal(N)
    return Dataset(X, y), beta


class TestDataset:
    def test_needs_intercept(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.zeros(3))

    def test_needs_finite(self):
        X = np.ones((3, 2))
        with pytest.raises(ValueError):
            Dataset(X, np.array([0.0, np.inf, 1.0]))


class TestPartition:
    def test_two_blocks(self):
        data, _ = small_data(N=8, p=2)
        plan = partition(data, 2, RngStream(1))
        a, b = plan.assignments
        assert len(a) == len(b) == 4
        assert sorted(np.r_[a, b].tolist()) == list(range(8))

    def test_single(self):
        data, _ = small_data(N=10, p=2)
        plan = partition(data, 1, RngStream(1))
        assert plan.assignments[0].tolist() == list(range(10))

    def test_sizes(self):
        design = SimDesign(p=3, N=20000, m=40)
        data = generate(design, replicate_stream(0, design, 0))
        plan = partition(data, 40, RngStream(0))
        assert plan.n == 500 and all(len(a) == 500 for a in plan.assignments)

    def test_indivisible(self):
        data, _ = small_data(N=10, p=2)
        with pytest.raises(ValueError, match="divisible"):
            partition(data, 3, RngStream(0))

    def test_deterministic(self):
        data, _ = small_data(N=40, p=2)
        a = partition(data, 4, RngStream(3, 1))
        b = partition(data, 4, RngStream(3, 1))
        assert all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))


def test_config_validation():
    with pytest.raises(ValueError):
        EstimationConfig(sparsity=0, dp_enabled=False)
    with pytest.raises(ValueError):
        EstimationConfig(eta=0, dp_enabled=False)
    with pytest.raises(ValueError):
        EstimationConfig(dp_enabled=True, budget=None)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 50), st.integers(0, 50),
       st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=40))
def test_gradient_message_round_trip(mid, t, k, vals):
    msg = GradientMessage(mid, t, k, np.array(vals, dtype=float))
    back = GradientMessage.from_bytes(msg.to_bytes())
    assert (back.machine_id, back.t, back.k) == (mid, t, k)
    assert back.vector.tobytes() == msg.vector.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.data())
def test_broadcast_round_trip(length, data):
    idx = np.array(sorted(data.draw(st.sets(st.integers(0, length - 1), max_size=length))), dtype=int)
    vals = np.array(data.draw(st.lists(st.floats(allow_nan=False), min_size=idx.size, max_size=idx.size)))
    msg = BroadcastMessage(2, 3, length, idx, vals)
    back = BroadcastMessage.from_bytes(msg.to_bytes())
    assert np.array_equal(back.indices, idx) and back.values.tobytes() == vals.astype(float).tobytes()
    dense = back.dense()
    assert dense.shape == (length,) and np.count_nonzero(dense) <= idx.size


class TestInitial:
    def test_noiseless_support_recovery(self):
        beta = np.zeros(21)
        beta[[0, 2, 5, 9]] = [0.5, 2.0, -1.5, 1.0]
        data, _ = small_data(N=300, p=20, noise=0.0, beta=beta)
        for loss in ("quantile", "least_squares"):
            cfg = EstimationConfig(sparsity=3, dp_enabled=False, loss=loss)
            est = initial_estimate(data, cfg)
            assert {2, 5, 9} <= set(est.support)

    def test_full_sparsity_is_least_squares(self):
        data, _ = small_data(N=200, p=4, noise=0.5)
        cfg = EstimationConfig(sparsity=5, free_intercept=False, dp_enabled=False, loss="least_squares",
                               init_outer=40, init_inner=50, C1=1e6)
        est = initial_estimate(data, cfg)
        ls = np.linalg.lstsq(data.X, data.y, rcond=None)[0]
        assert np.allclose(est.values, ls, atol=1e-8)

    def test_zero_response(self):
        data, _ = small_data(N=200, p=10)
        zero = Dataset(data.X, np.zeros(data.N))
        est = initial_estimate(zero, EstimationConfig(sparsity=3, dp_enabled=False))
        assert np.max(np.abs(est.values)) < 1e-6

    def test_bounds(self):
        data, _ = small_data(N=200, p=10, noise=0.1, beta=np.r_[0.0, 50.0, np.zeros(9)])
        est = initial_estimate(data, EstimationConfig(sparsity=2, C1=10, dp_enabled=False))
        assert len(est.support) <= 3 and np.max(np.abs(est.values)) <= 10


def test_l1_qr_matches_highs():
    data, _ = small_data(N=120, p=8, noise=1.0, seed=4)
    X, y, tau, lam = data.X, data.y, 0.3, 0.05
    ours = l1_quantile_regression(X, y, tau, lam, penalize_intercept=True)
    n, d = X.shape
    c = np.concatenate([np.full(2 * d, lam), np.full(n, tau / n), np.full(n, (1 - tau) / n)])
    A = np.hstack([X, -X, np.eye(n), -np.eye(n)])
    ref = scipy_linprog(c, A_eq=A, b_eq=y, bounds=(0, None), method="highs")
    obj = lambda b: np.mean(np.where(y - X @ b > 0, tau, tau - 1) * (y - X @ b)) + lam * np.abs(b).sum()
    assert obj(ours) == pytest.approx(ref.fun, abs=1e-7)


def test_one_plain_gradient_step():
    data, _ = small_data(N=80, p=5, noise=1.0)
    plan = partition(data, 4, RngStream(0))
    kern = KernelSpec("gaussian", 0.4)
    cfg = EstimationConfig(kernel=kern, sparsity=6, outer_iters=1, inner_iters=1, eta=0.3, C1=np.inf,
                           dp_enabled=False, free_intercept=False, sensitivity="assumed")
    b0 = np.linspace(-0.5, 0.5, 6)
    est, traces = dp_sparse_estimate(data, plan, cfg, None, init=SparseEstimate.from_values(b0))
    grads = []
    for idx in plan.assignments:
        Xt, yt, _, _ = pseudo_arrays(data.X[idx], data.y[idx], b0, kern, QuantileSpec(0.5))
        grads.append(Xt.T @ (Xt @ b0 - yt) / len(idx))
    expect = b0 - 0.3 / 4 * np.sum(grads, axis=0)
    assert np.allclose(est.values, expect, rtol=1e-12, atol=1e-14)
    assert len(traces) == 1


@pytest.fixture(scope="module")
def private_run():
    design = SimDesign(p=30, N=2000, m=5)
    data = generate(design, replicate_stream(8, design, 0))
    plan = partition(data, 5, RngStream(8, 1))
    budget = PrivacyBudget(0.5, 1 / 2000)
    cfg = EstimationConfig(eta=1.0, B0=0.002, sensitivity="assumed", budget=budget, sparsity=5, outer_iters=4,
                           inner_iters=3)
    ledger = BudgetLedger(budget)
    log = AccessLog()
    est, traces = dp_sparse_estimate(data, plan, cfg, RngStream(8, 2), ledger, log=log)
    return design, data, plan, cfg, ledger, log, est, traces


class TestPrivateRun:
    def test_support_and_bound(self, private_run):
        _, _, _, cfg, _, _, est, traces = private_run
        for tr in traces:
            slopes = [i for i in tr.support if i != 0]
            assert len(slopes) <= cfg.sparsity
        assert np.max(np.abs(est.values)) <= cfg.C1
        assert len([i for i in est.support if i != 0]) <= cfg.sparsity

    def test_message_accounting(self, private_run):
        _, data, plan, cfg, _, _, _, traces = private_run
        assert len(traces) == cfg.outer_iters * cfg.inner_iters
        assert sum(tr.messages for tr in traces) == cfg.outer_iters * cfg.inner_iters * (plan.m + 1)
        assert all(sz == 16 + 8 * data.X.shape[1] for tr in traces for sz in tr.message_sizes)

    def test_ledger(self, private_run):
        _, _, plan, cfg, ledger, _, _, _ = private_run
        eps, delta = cfg.budget.exact
        assert ledger.balanced()
        assert ledger.spent() == (eps / plan.m, delta / plan.m)
        assert ledger.unspent() == (eps * (1 - Fraction(1, plan.m)), delta * (1 - Fraction(1, plan.m)))

    def test_access_audit(self, private_run):
        _, _, plan, cfg, _, log, _, _ = private_run
        ev = log.events
        assert not any(a == "coordinator" and act != "noisy_ht" for a, _, act, _, _ in ev)
        # every release for (t, k) is preceded by exactly m fresh gradients for (t, k)
        for i, (actor, _, act, t, k) in enumerate(ev):
            if act == "noisy_ht":
                grads = [e for e in ev[:i] if e[2] == "gradient" and (e[3], e[4]) == (t, k)]
                assert sorted(e[1] for e in grads) == list(range(plan.m))
        reads = [e for e in ev if e[2] == "read_shard"]
        assert len(reads) == plan.m * cfg.outer_iters

    def test_deterministic(self, private_run):
        design, data, plan, cfg, _, _, est, _ = private_run
        again, _ = dp_sparse_estimate(data, plan, cfg, RngStream(8, 2))
        assert again.values.tobytes() == est.values.tobytes()
        threaded, _ = dp_sparse_estimate(data, plan, EstimationConfig(**{**cfg.__dict__, "threads": 3}),
                                         RngStream(8, 2))
        assert threaded.values.tobytes() == est.values.tobytes()


def test_coordinator_holds_no_data():
    cfg = EstimationConfig(dp_enabled=False)
    coord = Coordinator(2, 10, 4, cfg, None, None)
    assert not any(isinstance(v, (Dataset, np.ndarray)) for v in vars(coord).values())


def test_budget_exhaustion():
    b = PrivacyBudget(1.0, 0.01)
    cfg = EstimationConfig(budget=b, outer_iters=1, inner_iters=1, sparsity=1)
    coord = Coordinator(1, 4, 3, cfg, RngStream(0), None)
    raw = [GradientMessage(0, 1, 1, np.ones(3)).to_bytes()]
    coord.step(np.zeros(3), raw, 1, 1)
    with pytest.raises(PrivacyError):
        coord.step(np.zeros(3), [GradientMessage(0, 1, 2, np.ones(3)).to_bytes()], 1, 2)


def test_stale_and_missing_messages():
    cfg = EstimationConfig(dp_enabled=False, sparsity=1)
    coord = Coordinator(2, 4, 3, cfg, None, None)
    with pytest.raises(EstimationError):
        coord.step(np.zeros(3), [GradientMessage(0, 1, 1, np.ones(3)).to_bytes()], 1, 1)
    raw = [GradientMessage(j, 1, 2, np.ones(3)).to_bytes() for j in range(2)]
    with pytest.raises(EstimationError, match="stale"):
        coord.step(np.zeros(3), raw, 1, 1)


def test_nonfinite_update_aborts_with_trace():
    data, _ = small_data(N=40, p=3)
    plan = partition(data, 2, RngStream(0))
    cfg = EstimationConfig(eta=1e308, sparsity=2, dp_enabled=False, sensitivity="assumed", outer_iters=2)
    with pytest.raises(EstimationError) as info:
        dp_sparse_estimate(data, plan, cfg, None, init=SparseEstimate.from_values(np.ones(4)))
    assert info.value.traces is not None


def test_worker_reads_only_own_shard():
    data, _ = small_data(N=20, p=2)
    plan = partition(data, 2, RngStream(0))
    w = Worker(1, data.rows(plan.assignments[1]))
    assert w.n == 10


def test_private_worse_than_nonprivate_and_eps_trend():
    design = SimDesign(p=50, N=4000, m=8)
    errs = {"off": [], 0.1: [], 1.0: []}
    for rep in range(20):
        data = generate(design, replicate_stream(31, design, rep))
        plan = partition(data, 8, RngStream(31, (rep, 1)))
        init = initial_estimate(data.rows(plan.assignments[0]), EstimationConfig(dp_enabled=False))
        off = EstimationConfig(eta=1.0, dp_enabled=False)
        errs["off"].append(np.linalg.norm(dp_sparse_estimate(data, plan, off, None, init=init)[0].values - design.beta))
        for eps in (0.1, 1.0):
            cfg = EstimationConfig(eta=1.0, B0=0.0012, sensitivity="assumed", budget=PrivacyBudget(eps, 1 / 4000))
            est, _ = dp_sparse_estimate(data, plan, cfg, RngStream(31, (rep, 2)), init=init)
            errs[eps].append(np.linalg.norm(est.values - design.beta))
    m = {k: np.mean(v) for k, v in errs.items()}
    assert m[0.1] > m[1.0] > m["off"]
