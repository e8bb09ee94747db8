"""Simulation designs: AR(1) Gaussian covariates, two error models, three noise laws."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .engine import Dataset
from .privacy import RngStream

NOISES = ("normal", "t3", "cauchy")
MODELS = ("homoscedastic", "heteroscedastic")


def default_beta(p: int) -> np.ndarray:
    """Intercept 1, slopes (1, 2, 3, 4, 5), zeros after."""
    b = np.zeros(p + 1)
    head = np.array([1.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    k = min(p + 1, head.size)
    b[:k] = head[:k]
    return b


@dataclass(frozen=True)
class SimDesign:
    model: str = "homoscedastic"
    noise: str = "normal"
    p: int = 500
    N: int = 20000
    m: int = 40
    beta_true: tuple | None = None
    rho: float = 0.5
    tau: float = 0.5
    noise_scale: float = 1.0  # 0 gives noiseless responses

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.noise not in NOISES:
            raise ValueError(f"noise must be one of {NOISES}")
        if self.p < 1 or self.N < 1 or self.m < 1:
            raise ValueError("p, N and m must be positive")
        if self.N % self.m:
            raise ValueError(f"N={self.N} is not divisible by m={self.m}")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if not self.noise_scale >= 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.beta_true is not None and len(self.beta_true) != self.p + 1:
            raise ValueError("beta_true must have length p + 1")

    @property
    def n(self) -> int:
        return self.N // self.m

    @property
    def beta(self) -> np.ndarray:
        if self.beta_true is None:
            return default_beta(self.p)
        return np.asarray(self.beta_true, dtype=float)

    @property
    def design_id(self) -> str:
        out = f"{self.model[:5]}-{self.noise}-p{self.p}-N{self.N}-m{self.m}-rho{self.rho:g}-tau{self.tau:g}"
        if self.noise_scale != 1.0:
            out += f"-sc{self.noise_scale:g}"
        if self.beta_true is not None:
            out += "-b" + hashlib.sha256(np.asarray(self.beta_true, float).tobytes()).hexdigest()[:8]
        return out

    def stream_key(self) -> int:
        digest = hashlib.sha256(self.design_id.encode()).digest()
        return int.from_bytes(digest[:4], "little")


def ar1_factor(p: int, rho: float) -> np.ndarray:
    """Lower Cholesky factor of Sigma_ij = rho^|i-j| in closed form."""
    i = np.arange(p)
    L = np.tril(rho ** np.abs(i[:, None] - i[None, :]))
    L[:, 1:] *= np.sqrt(1 - rho * rho)
    return L


def ar1_covariates(Z: np.ndarray, rho: float) -> np.ndarray:
    """Z @ L.T for the AR(1) Cholesky factor L, in O(N p) by recursion."""
    X = np.empty_like(Z)
    X[:, 0] = Z[:, 0]
    c = np.sqrt(1 - rho * rho)
    for j in range(1, Z.shape[1]):
        X[:, j] = rho * X[:, j - 1] + c * Z[:, j]
    return X


def noise_quantile(noise: str, tau: float) -> float:
    dist = {"normal": stats.norm, "t3": stats.t(3), "cauchy": stats.cauchy}[noise]
    return float(dist.ppf(tau))


def draw_noise(noise: str, size: int, gen: np.random.Generator) -> np.ndarray:
    if noise == "normal":
        return gen.standard_normal(size)
    if noise == "t3":
        return gen.standard_t(3, size)
    return gen.standard_cauchy(size)


def generate(design: SimDesign, rng: RngStream) -> Dataset:
    gen = rng.generator
    Z = gen.standard_normal((design.N, design.p))
    X = np.hstack([np.ones((design.N, 1)), ar1_covariates(Z, design.rho)])
    eps = design.noise_scale * draw_noise(design.noise, design.N, gen)
    if design.tau != 0.5:
        eps = eps - design.noise_scale * noise_quantile(design.noise, design.tau)
    if design.model == "heteroscedastic":
        eps = (1.0 + 0.4 * X[:, 1]) * eps
    y = X @ design.beta + eps
    return Dataset(X, y)


def replicate_stream(master_seed: int, design: SimDesign, rep: int) -> RngStream:
    """Data stream for replicate ``rep``; depends only on (seed, design, rep)."""
    return RngStream(master_seed, (design.stream_key(), rep))


def l2_error(estimate, beta_true) -> float:
    a = np.asarray(getattr(estimate, "values", estimate), dtype=float)
    b = np.asarray(beta_true, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return float(np.linalg.norm(a - b))
