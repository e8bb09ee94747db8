"""Check loss, smoothing kernels and the Newton-type pseudo samples."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate


def check_loss(u, tau: float):
    """rho_tau(u) = u * (tau - 1{u <= 0})."""
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u <= 0))
    return float(out) if out.ndim == 0 else out


def check_subgradient(u, tau: float):
    u = np.asarray(u, dtype=float)
    return tau - (u <= 0).astype(float)


@dataclass(frozen=True)
class QuantileSpec:
    tau: float = 0.5

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")


def _gaussian(u):
    return np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)


def _uniform(u):
    return np.where(np.abs(u) <= 1.0, 0.5, 0.0)


def _epanechnikov(u):
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


_FAMILIES = {
    "gaussian": (_gaussian, np.inf),
    "uniform": (_uniform, 1.0),
    "epanechnikov": (_epanechnikov, 1.0),
}


@lru_cache(maxsize=None)
def _verify_family(family: str) -> float:
    """Check normalisation, symmetry and nonnegativity; return kappa_u."""
    fn, supp = _FAMILIES[family]
    f = lambda t: float(fn(np.float64(t)))
    if np.isinf(supp):
        mass = integrate.quad(f, -np.inf, np.inf, epsabs=1e-12)[0]
    else:
        mass = integrate.quad(f, -supp, supp, epsabs=1e-12, points=[0.0])[0]
    if abs(mass - 1.0) > 1e-6:
        raise ValueError(f"kernel {family} integrates to {mass}")
    grid = np.linspace(-3, 3, 601)
    vals = fn(grid)
    if np.any(vals < 0) or not np.array_equal(vals, fn(-grid)):
        raise ValueError(f"kernel {family} is not symmetric and nonnegative")
    return float(fn(np.float64(0.0)))


@dataclass(frozen=True)
class KernelSpec:
    """Smoothing kernel H with bandwidth h; weights are floored at density_floor."""

    family: str = "gaussian"
    bandwidth: float = 0.1
    density_floor: float = 1e-8
    kappa_u: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.density_floor >= 0:
            raise ValueError("density_floor must be nonnegative")
        object.__setattr__(self, "kappa_u", _verify_family(self.family))

    def density(self, u):
        return _FAMILIES[self.family][0](np.asarray(u, dtype=float))

    def with_bandwidth(self, h: float) -> "KernelSpec":
        return KernelSpec(self.family, h, self.density_floor)


def kernel_weight(e, k: KernelSpec):
    """max(H(e/h)/h, floor)."""
    e = np.asarray(e, dtype=float)
    w = np.maximum(k.density(e / k.bandwidth) / k.bandwidth, k.density_floor)
    return float(w) if w.ndim == 0 else w


def default_bandwidth(p: int, n: int, c: float = 0.5) -> float:
    """c * (log p / n)^(1/3); used with n = N globally and n = local size for precision."""
    return c * (math.log(p) / n) ** (1.0 / 3.0)


@dataclass
class PseudoSample:
    x_tilde: np.ndarray
    y_tilde: float


class DegenerateWeight(ValueError):
    pass


def pseudo_arrays(X, y, beta, k: KernelSpec, q: QuantileSpec):
    """Vectorised pseudo covariates, responses and weights for a block of rows.

    Returns (X_tilde, y_tilde, w, e) with X_tilde = sqrt(w) X and
    y_tilde = X_tilde beta - (1{e <= 0} - tau) / sqrt(w).
    """
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    e = np.asarray(y, dtype=float) - X @ beta
    w = np.atleast_1d(kernel_weight(e, k))
    if np.any(w <= 0):
        raise DegenerateWeight("zero kernel weight; use a positive density_floor")
    sw = np.sqrt(w)
    Xt = X * sw[:, None]
    yt = Xt @ beta - ((e <= 0) - q.tau) / sw
    return Xt, yt, w, e


def make_pseudo_sample(x, y: float, beta, k: KernelSpec, q: QuantileSpec) -> PseudoSample:
    Xt, yt, _, _ = pseudo_arrays(np.atleast_2d(x), np.atleast_1d(y), beta, k, q)
    return PseudoSample(Xt[0], float(yt[0]))


def clipped_gradient_sum(Xt, r, clip: float | None) -> np.ndarray:
    """Sum over rows of r_i * Xt_i with each term clipped entrywise to [-clip, clip].

    Only rows whose largest entry can exceed the bound are materialised.
    """
    g = Xt.T @ r
    if clip is None:
        return g
    big = np.abs(r) * np.max(np.abs(Xt), axis=1) > clip
    if np.any(big):
        terms = Xt[big] * r[big, None]
        g -= terms.sum(axis=0)
        g += np.clip(terms, -clip, clip).sum(axis=0)
    return g


def local_gradient(samples, beta, clip: float | None = None) -> np.ndarray:
    """(1/n) sum (x~'beta - y~) x~ over a shard, per-sample terms clipped at ``clip``.

    ``samples`` is either a list of PseudoSample or a tuple (X_tilde, y_tilde).
    """
    if isinstance(samples, tuple):
        Xt, yt = samples
    else:
        if len(samples) == 0:
            raise ValueError("empty shard")
        Xt = np.vstack([s.x_tilde for s in samples])
        yt = np.array([s.y_tilde for s in samples])
    if len(yt) == 0:
        raise ValueError("empty shard")
    r = Xt @ np.asarray(beta, dtype=float) - yt
    return clipped_gradient_sum(Xt, r, clip) / len(yt)
