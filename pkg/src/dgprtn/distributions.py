"""Closed-form probability machinery for the Binomial edge model.

Edges of the summary graph are Binomial counts with ``n -> inf``,
``lam -> 0`` and ``m = n * lam`` held finite. Everything here is written
in terms of ``m``:

* the stationary point that maps an unconstrained Gaussian onto a valid
  ``m`` in (0, 1/2) (:func:`theorem1_m`),
* the proxy excess error ``delta_f2`` of the Gaussian ``N(m, m(1-m))``,
* the finite-n exact Binomial KL and its n-free upper bound.

Brute-force oracles (golden-section argmin, CDF comparison) live next to
the closed forms so both routes can be checked against each other.
All functions work in double precision on floats or numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .numcore import DomainError

SQRT2_HALF_MINUS_HALF = math.sqrt(2.0) / 2.0 - 0.5


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise DomainError(f"Gaussian variance must be positive, got {self.var}")


@dataclass(frozen=True)
class BinomialSpec:
    """Binomial with ``m = n * lam`` fixed; ``n`` is None in the limit."""

    m: float
    n: int | None = None

    def __post_init__(self):
        if not 0 < self.m < 0.5:
            raise DomainError(f"m must lie in (0, 1/2), got {self.m}")
        if self.n is not None:
            if self.n < 1:
                raise DomainError("n must be >= 1")
            if not 0 < self.lam < 1:
                raise DomainError(f"lam = m/n = {self.lam} outside (0, 1)")

    @property
    def lam(self) -> float:
        if self.n is None:
            return 0.0
        return self.m / self.n

    def proxy(self) -> "ProxyGaussian":
        return ProxyGaussian(self.m)


@dataclass(frozen=True)
class ProxyGaussian:
    """De Moivre-Laplace stand-in ``N(m, m(1 - m))`` for the limit Binomial."""

    m: float

    @property
    def mean(self) -> float:
        return self.m

    @property
    def var(self) -> float:
        return self.m * (1.0 - self.m)

    def as_gaussian(self) -> GaussianParams:
        return GaussianParams(self.mean, self.var)


def gaussian_kl(p: GaussianParams, q: GaussianParams) -> float:
    """KL(p || q) for univariate Gaussians."""
    return (0.5 * math.log(q.var / p.var)
            + (p.var + (p.mu - q.mu) ** 2) / (2.0 * q.var) - 0.5)


def f1(x: float, target: GaussianParams) -> float:
    """KL(N(x, x(1-x)) || target), the objective whose argmin defines ``m``."""
    if not 0 < x < 1:
        raise DomainError(f"x must lie in (0, 1), got {x}")
    if not target.mu < 0.5:
        raise DomainError("target mean must be below 1/2")
    return gaussian_kl(GaussianParams(x, x * (1.0 - x)), target)


def theorem1_m(target: GaussianParams) -> float:
    """Closed-form argmin of :func:`f1` on (0, 1) for ``target.mu < 1/2``."""
    if not target.mu < 0.5:
        raise DomainError(f"only the mu < 1/2 branch is defined, got mu={target.mu}")
    l = 2.0 * target.var / (1.0 - 2.0 * target.mu)
    return m_from_l(l)


def m_from_l(l):
    """``(1 + l - sqrt(1 + l^2)) / 2``, evaluated without cancellation.

    The direct form loses all digits for small ``l``; the algebraically equal
    ``l / (1 + l + sqrt(1 + l^2))`` does not.
    """
    l = np.asarray(l, dtype=np.float64)
    out = l / (1.0 + l + np.sqrt(1.0 + l * l))
    return float(out) if out.ndim == 0 else out


def golden_argmin_f1(target: GaussianParams, grid: int = 10_000, tol: float = 1e-9) -> float:
    """Brute-force argmin of :func:`f1`: grid pre-bracket, then golden section."""
    xs = np.linspace(0.0, 1.0, grid + 1)[1:-1]
    vals = np.array([f1(x, target) for x in xs])
    i = int(np.argmin(vals))
    lo = xs[max(i - 1, 0)]
    hi = xs[min(i + 1, xs.size - 1)]
    res = optimize.minimize_scalar(lambda x: f1(x, target), bracket=(lo, xs[i], hi),
                                   method="golden", tol=tol)
    return float(res.x)


def delta_f2(m):
    """Excess of the proxy KL above its infimum, in the lam -> 0 limit."""
    m_arr = np.asarray(m, dtype=np.float64)
    if np.any(~((m_arr > 0) & (m_arr < 0.5))):
        raise DomainError("delta_f2 is defined for m in (0, 1/2)")
    out = np.sqrt(1.0 - m_arr) + 0.5 / (1.0 - m_arr) - 1.5
    return float(out) if out.ndim == 0 else out


def binomial_kl_exact(n: int, lam: float, lam0: float) -> float:
    """Exact KL(B(n, lam) || B(n, lam0))."""
    if n < 1:
        raise DomainError("n must be >= 1")
    if not (0 < lam < 1 and 0 < lam0 < 1):
        raise DomainError("success probabilities must lie strictly inside (0, 1)")
    return (n * lam * math.log(lam / lam0)
            + n * (1.0 - lam) * (math.log1p(-lam) - math.log1p(-lam0)))


def binomial_kl_poisson_limit(m: float, m0: float) -> float:
    """n -> inf limit of the exact KL with ``n*lam = m``, ``n*lam0 = m0``."""
    return m * math.log(m / m0) + m0 - m


def _h(x):
    return 1.0 - x + 0.5 * x * x


def binomial_kl_bound(m, m0):
    """n-free upper bound on the limit Binomial KL (valid when m > m0).

    Evaluated for any pair in (0, 1/2)^2; it is zero on the diagonal.
    """
    m_arr = np.asarray(m, dtype=np.float64)
    m0_arr = np.asarray(m0, dtype=np.float64)
    for v in (m_arr, m0_arr):
        if np.any(~((v > 0) & (v < 0.5))):
            raise DomainError("binomial_kl_bound needs m, m0 in (0, 1/2)")
    out = (m_arr * np.log(m_arr / m0_arr)
           + (1.0 - m_arr) * np.log(_h(m_arr) / _h(m0_arr)))
    return float(out) if out.ndim == 0 else out


def proxy_cdf_gap(m: float, n: int, continuity: bool = True) -> float:
    """Largest |F_binom(k) - F_proxy(k)| over the integer support.

    ``continuity`` evaluates the Gaussian at ``k + 1/2`` (the usual
    De Moivre-Laplace correction); without it the Gaussian is read at ``k``.
    """
    spec = BinomialSpec(m, n)
    binom = stats.binom(n, spec.lam)
    proxy = spec.proxy()
    gauss = stats.norm(proxy.mean, math.sqrt(proxy.var))
    kmax = int(binom.ppf(1 - 1e-15)) + 2
    k = np.arange(0, kmax + 1)
    shift = 0.5 if continuity else 0.0
    return float(np.max(np.abs(binom.cdf(k) - gauss.cdf(k + shift))))
