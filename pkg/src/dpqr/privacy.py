"""Privacy mechanisms, peeling selection and budget accounting.

All randomness flows through :class:`RngStream`.  Laplace draws use the
inverse CDF of a 53-bit uniform built from one raw 64-bit word, so another
implementation driving the same PCG64 stream reproduces them exactly:

    u = ((word >> 11) + 0.5) / 2**53
    x = -b * sign(u - 0.5) * log(1 - 2 * |u - 0.5|)
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


class PrivacyError(ValueError):
    pass


def _exact(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if not math.isfinite(float(value)):
        raise PrivacyError(f"budget values must be finite, got {value}")
    # the shortest decimal repr, so 0.1 becomes 1/10 rather than its binary expansion
    return Fraction(repr(float(value)))


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) pair.

    The float fields are used for noise calibration.  An exact rational copy
    is carried alongside so that splits recombine without rounding.
    """

    epsilon: float
    delta: float
    exact: tuple = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.exact is None:
            object.__setattr__(self, "exact", (_exact(self.epsilon), _exact(self.delta)))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "delta", float(self.delta))
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise PrivacyError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (0 < self.delta < 1):
            raise PrivacyError(f"delta must lie in (0, 1), got {self.delta}")

    @classmethod
    def from_exact(cls, eps: Fraction, delta: Fraction) -> "PrivacyBudget":
        return cls(float(eps), float(delta), exact=(Fraction(eps), Fraction(delta)))

    def scaled(self, num: int, den: int = 1) -> "PrivacyBudget":
        e, d = self.exact
        return PrivacyBudget.from_exact(e * num / den, d * num / den)


def split_budget(parent: PrivacyBudget, parts: int) -> list[PrivacyBudget]:
    """Split a budget into ``parts`` equal shares (basic composition)."""
    if int(parts) != parts or parts < 1:
        raise PrivacyError(f"parts must be a positive integer, got {parts}")
    parts = int(parts)
    e, d = parent.exact
    child = PrivacyBudget.from_exact(e / parts, d / parts)
    assert child.exact[0] * parts == e and child.exact[1] * parts == d
    return [child] * parts


@dataclass
class LedgerEntry:
    label: str
    epsilon: Fraction
    delta: Fraction
    kind: str  # "spent" or "unspent"


class BudgetLedger:
    """Audit trail of consumption under basic composition.

    Advisory only: it records and checks, it never blocks a mechanism.
    Budget that an algorithm reserves but never draws is recorded with
    :meth:`release` so that spent + unspent can be compared with the root.
    """

    def __init__(self, root: PrivacyBudget):
        self.root = root
        self.entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def spend(self, label: str, budget: PrivacyBudget, count: int = 1):
        e, d = budget.exact
        with self._lock:
            self.entries.append(LedgerEntry(label, e * count, d * count, "spent"))

    def spend_pair(self, label: str, epsilon: Fraction, delta: Fraction):
        with self._lock:
            self.entries.append(LedgerEntry(label, Fraction(epsilon), Fraction(delta), "spent"))

    def release(self, label: str, epsilon: Fraction, delta: Fraction):
        with self._lock:
            self.entries.append(LedgerEntry(label, Fraction(epsilon), Fraction(delta), "unspent"))

    def totals(self, kind: str | None = None) -> tuple[Fraction, Fraction]:
        with self._lock:
            rows = [x for x in self.entries if kind is None or x.kind == kind]
        return sum((x.epsilon for x in rows), Fraction(0)), sum((x.delta for x in rows), Fraction(0))

    def spent(self):
        return self.totals("spent")

    def unspent(self):
        return self.totals("unspent")

    def overspent(self) -> bool:
        e, d = self.spent()
        return e > self.root.exact[0] or d > self.root.exact[1]

    def balanced(self) -> bool:
        """True when spent plus released budget equals the root exactly."""
        return self.totals() == self.root.exact

    def by_label(self) -> dict[str, tuple[Fraction, Fraction]]:
        out: dict[str, tuple[Fraction, Fraction]] = {}
        with self._lock:
            rows = list(self.entries)
        for x in rows:
            key = f"{x.kind}:{x.label}"
            e0, d0 = out.get(key, (Fraction(0), Fraction(0)))
            out[key] = (e0 + x.epsilon, d0 + x.delta)
        return out

    def summary(self) -> dict:
        se, sd = self.spent()
        ue, ud = self.unspent()
        return {
            "root": {"epsilon": self.root.epsilon, "delta": self.root.delta,
                     "exact": [str(self.root.exact[0]), str(self.root.exact[1])]},
            "spent": {"epsilon": float(se), "delta": float(sd), "exact": [str(se), str(sd)]},
            "unspent": {"epsilon": float(ue), "delta": float(ud), "exact": [str(ue), str(ud)]},
            "balanced": self.balanced(),
            "overspent": self.overspent(),
            "labels": {k: [str(a), str(b)] for k, (a, b) in self.by_label().items()},
        }


class RngStream:
    """Seeded random stream; (seed, stream_id) fixes the whole sequence."""

    def __init__(self, seed: int, stream_id: int | Sequence[int] = 0):
        self.seed = int(seed)
        sid = (stream_id,) if np.isscalar(stream_id) else tuple(stream_id)
        self.stream_id = tuple(int(s) for s in sid)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self._bitgen = np.random.PCG64(ss)
        self.generator = np.random.Generator(self._bitgen)

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(int(i) for i in ids))

    def uniform53(self, size) -> np.ndarray:
        words = self._bitgen.random_raw(size=size)
        return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def laplace(self, scale: float, size) -> np.ndarray:
        u = self.uniform53(size) - 0.5
        return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


@dataclass(frozen=True)
class NoiseSpec:
    mechanism: str
    sensitivity: float
    budget: PrivacyBudget

    def __post_init__(self):
        if self.mechanism not in ("laplace", "gaussian"):
            raise PrivacyError(f"unknown mechanism {self.mechanism!r}")
        if not self.sensitivity >= 0:
            raise PrivacyError("sensitivity must be nonnegative")

    @property
    def scale(self) -> float:
        """Laplace scale b or Gaussian standard deviation sigma."""
        eps, delta = self.budget.epsilon, self.budget.delta
        if self.mechanism == "laplace":
            return self.sensitivity / eps
        return math.sqrt(2.0 * math.log(1.25 / delta)) * self.sensitivity / eps


def _finite(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise PrivacyError("input contains non-finite entries")
    return v


def laplace_mechanism(v, spec: NoiseSpec, rng: RngStream, ledger: BudgetLedger | None = None,
                      label: str = "laplace") -> np.ndarray:
    if spec.mechanism != "laplace":
        raise PrivacyError("laplace_mechanism needs a laplace NoiseSpec")
    v = _finite(v)
    if ledger is not None:
        ledger.spend_pair(label, spec.budget.exact[0], Fraction(0))
    if spec.sensitivity == 0:
        return v.copy()
    return v + rng.laplace(spec.scale, v.shape)


def gaussian_mechanism(v, spec: NoiseSpec, rng: RngStream, ledger: BudgetLedger | None = None,
                       label: str = "gaussian") -> np.ndarray:
    if spec.mechanism != "gaussian":
        raise PrivacyError("gaussian_mechanism needs a gaussian NoiseSpec")
    v = _finite(v)
    if ledger is not None:
        ledger.spend(label, spec.budget)
    if spec.sensitivity == 0:
        return v.copy()
    return v + spec.scale * rng.normal(v.shape)


def peeling_scale(lam: float, s: int, budget: PrivacyBudget) -> float:
    """Laplace scale used by every peeling round and by the release step."""
    return lam * 2.0 * math.sqrt(3.0 * s * math.log(1.0 / budget.delta)) / budget.epsilon


def noisy_hard_threshold(v, s: int, budget: PrivacyBudget | None, lam: float, rng: RngStream | None,
                         forced: Sequence[int] = (), ledger: BudgetLedger | None = None,
                         label: str = "noisy_ht") -> np.ndarray:
    """Private top-s selection by peeling.

    Parameters
    ----------
    v : array, shape (p,)
        Vector to sparsify.
    s : int
        Number of coordinates chosen by peeling.
    budget : PrivacyBudget or None
        Budget of this call; may be None only when ``lam == 0``.
    lam : float
        Sensitivity of ``v`` in sup norm.  ``lam == 0`` gives exact top-s.
    forced : sequence of int
        Coordinates kept unconditionally (e.g. an intercept).  They are not
        part of the peeling but their released values are still noised, and
        the noise scale is computed for ``s + len(forced)`` releases.

    Returns
    -------
    array, shape (p,)
        Selected raw values plus fresh Laplace noise, zeros elsewhere.
    """
    v = _finite(v)
    p = v.size
    forced = [int(i) for i in forced]
    if s < 0 or s + len(forced) > p or (s == 0 and not forced):
        raise PrivacyError(f"need 1 <= s <= p, got s={s}, p={p}")
    if lam < 0:
        raise PrivacyError("lambda must be nonnegative")
    noisy = lam > 0
    if noisy and (budget is None or rng is None):
        raise PrivacyError("a budget and rng are required when lambda > 0")
    scale = peeling_scale(lam, s + len(forced), budget) if noisy else 0.0

    mag = np.abs(v)
    avail = np.ones(p, dtype=bool)
    avail[forced] = False
    chosen = list(forced)
    for _ in range(s):
        score = mag + rng.laplace(scale, p) if noisy else mag.copy()
        score[~avail] = -np.inf
        j = int(np.argmax(score))  # first maximum: lowest index wins ties
        avail[j] = False
        chosen.append(j)

    out = np.zeros(p)
    idx = np.array(sorted(chosen), dtype=int)
    out[idx] = v[idx]
    if noisy:
        out[idx] += rng.laplace(scale, idx.size)
        if ledger is not None:
            ledger.spend(label, budget)
    return out


def truncate(v, r: float) -> np.ndarray:
    """Project onto the sup-norm ball of radius r."""
    if not r > 0:
        raise PrivacyError("radius must be positive")
    v = np.asarray(v, dtype=float)
    return np.clip(v, -r, r)
