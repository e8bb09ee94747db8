import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from dpqr.designs import SimDesign, generate, replicate_stream
from dpqr.quantile import (DegenerateWeight, KernelSpec, PseudoSample, QuantileSpec, check_loss,
                           check_subgradient, default_bandwidth, kernel_weight, local_gradient,
                           make_pseudo_sample, pseudo_arrays)


def test_check_loss_values():
    assert check_loss(2.0, 0.5) == 1.0
    assert check_loss(-1.0, 0.25) == 0.75
    for tau in (0.1, 0.5, 0.9):
        assert check_loss(0.0, tau) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda u: abs(u) > 1e-3), st.floats(0.01, 0.99))
def test_check_loss_derivative(u, tau):
    h = 1e-6 * max(1.0, abs(u))
    fd = (check_loss(u + h, tau) - check_loss(u - h, tau)) / (2 * h)
    assert fd == pytest.approx(float(check_subgradient(u, tau)), abs=1e-6)
    assert check_loss(u, tau) >= 0


def test_quantile_spec_range():
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            QuantileSpec(bad)


class TestKernels:
    def test_uniform_at_zero(self):
        assert kernel_weight(0.0, KernelSpec("uniform", 1.0)) == 0.5

    def test_gaussian_at_zero(self):
        assert kernel_weight(0.0, KernelSpec("gaussian", 1.0)) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)

    def test_floor(self):
        assert kernel_weight(50.0, KernelSpec("gaussian", 1.0)) == 1e-8
        assert kernel_weight(5.0, KernelSpec("uniform", 1.0)) == 1e-8

    @pytest.mark.parametrize("family,supp", [("gaussian", np.inf), ("uniform", 1.0), ("epanechnikov", 1.0)])
    def test_normalised_and_symmetric(self, family, supp):
        k = KernelSpec(family, 1.0)
        f = lambda u: float(k.density(u))
        lo, hi = (-np.inf, np.inf) if np.isinf(supp) else (-supp, supp)
        assert abs(integrate.quad(f, lo, hi)[0] - 1.0) < 1e-6
        u = np.linspace(-4, 4, 1001)
        assert np.array_equal(k.density(u), k.density(-u))
        assert k.kappa_u == pytest.approx(float(k.density(0.0)))

    def test_rejects(self):
        with pytest.raises(ValueError):
            KernelSpec("triangle", 1.0)
        with pytest.raises(ValueError):
            KernelSpec("gaussian", 0.0)

    def test_bandwidth_default(self):
        assert default_bandwidth(500, 20000) == pytest.approx(0.5 * (math.log(500) / 20000) ** (1 / 3))


class TestPseudoSample:
    def test_hand_example(self):
        ps = make_pseudo_sample([1.0], 0.0, [0.0], KernelSpec("uniform", 1.0), QuantileSpec(0.5))
        assert ps.x_tilde[0] == pytest.approx(math.sqrt(0.5))
        assert ps.y_tilde == pytest.approx(-math.sqrt(0.5))

    def test_positive_residual_sign(self):
        k = KernelSpec("uniform", 1.0)
        ps = make_pseudo_sample([1.0, 0.3], 0.4, [0.0, 0.0], k, QuantileSpec(0.5))
        w = 0.5
        assert ps.y_tilde == pytest.approx(0.5 / math.sqrt(w))

    def test_scaling_in_x(self):
        k, q = KernelSpec("gaussian", 0.7), QuantileSpec(0.3)
        a = make_pseudo_sample([1.0, -2.0], 1.3, [0.0, 0.0], k, q)
        b = make_pseudo_sample([2.0, -4.0], 1.3, [0.0, 0.0], k, q)
        assert np.allclose(b.x_tilde, 2 * a.x_tilde)

    def test_degenerate_weight(self):
        k = KernelSpec("uniform", 1.0, density_floor=0.0)
        with pytest.raises(DegenerateWeight):
            make_pseudo_sample([1.0], 10.0, [0.0], k, QuantileSpec(0.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8), st.floats(0.05, 2.0), st.sampled_from(["gaussian", "uniform", "epanechnikov"]))
def test_pseudo_gram_identity(seed, d, h, family):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((50, d))
    y = rng.standard_normal(50)
    beta = rng.standard_normal(d) * 0.3
    k = KernelSpec(family, h)
    Xt, yt, w, e = pseudo_arrays(X, y, beta, k, QuantileSpec(0.4))
    D = (X * np.maximum(k.density(e / h) / h, k.density_floor)[:, None]).T @ X
    assert np.allclose(Xt.T @ Xt, D, rtol=1e-12, atol=1e-12)


class TestGradient:
    def test_hand_example_and_clip(self):
        s = [PseudoSample(np.array([1.0, 0.0]), 2.0)]
        assert np.array_equal(local_gradient(s, [0.0, 0.0]), [-2.0, 0.0])
        assert np.array_equal(local_gradient(s, [0.0, 0.0], clip=1.0), [-1.0, 0.0])

    def test_zero_at_least_squares_solution(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((40, 3))
        y = rng.standard_normal(40)
        Xt, yt, _, _ = pseudo_arrays(X, y, np.zeros(3), KernelSpec("gaussian", 0.5), QuantileSpec(0.5))
        b = np.linalg.lstsq(Xt, yt, rcond=None)[0]
        assert np.max(np.abs(local_gradient((Xt, yt), b))) < 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            local_gradient([], [0.0])

    def test_list_and_tuple_agree(self):
        rng = np.random.default_rng(4)
        X, y = rng.standard_normal((10, 3)), rng.standard_normal(10)
        k, q = KernelSpec("gaussian", 0.4), QuantileSpec(0.5)
        samples = [make_pseudo_sample(X[i], y[i], np.zeros(3), k, q) for i in range(10)]
        Xt, yt, _, _ = pseudo_arrays(X, y, np.zeros(3), k, q)
        b = rng.standard_normal(3)
        assert np.allclose(local_gradient(samples, b, 0.3), local_gradient((Xt, yt), b, 0.3))

    def test_clip_matches_naive(self):
        rng = np.random.default_rng(5)
        Xt, yt = rng.standard_normal((200, 4)) * 3, rng.standard_normal(200) * 3
        b = rng.standard_normal(4)
        terms = np.clip((Xt @ b - yt)[:, None] * Xt, -1.5, 1.5)
        assert np.allclose(local_gradient((Xt, yt), b, 1.5), terms.mean(axis=0), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("tau", [0.5, 0.3])
def test_fixed_point_at_truth(tau):
    """At beta* the transformed-LS gradient has mean zero: |g_j| <= 3 sd_j / sqrt(n)."""
    design = SimDesign(p=5, N=100_000, m=1, noise="t3", tau=tau)
    data = generate(design, replicate_stream(77, design, 0))
    Xt, yt, _, _ = pseudo_arrays(data.X, data.y, design.beta, KernelSpec("uniform", 0.5), QuantileSpec(tau))
    terms = (Xt @ design.beta - yt)[:, None] * Xt
    g = terms.mean(axis=0)
    sd = terms.std(axis=0)
    assert np.all(np.abs(g) <= 3 * sd / math.sqrt(data.N))


def test_fixed_point_shrinks():
    design = SimDesign(p=3, N=64_000, m=1)
    data = generate(design, replicate_stream(5, design, 0))
    k, q = KernelSpec("gaussian", 0.3), QuantileSpec(0.5)
    norms = []
    for n in (1000, 64_000):
        Xt, yt, _, _ = pseudo_arrays(data.X[:n], data.y[:n], design.beta, k, q)
        norms.append(np.linalg.norm(local_gradient((Xt, yt), design.beta)))
    assert norms[1] < norms[0]
