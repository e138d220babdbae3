import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from dgprtn import distributions as D
from dgprtn.distributions import GaussianParams
from dgprtn.numcore import DomainError

mp.mp.dps = 40


def mp_m(mu, var):
    l = 2 * mp.mpf(var) / (1 - 2 * mp.mpf(mu))
    return (1 + l - mp.sqrt(1 + l * l)) / 2


def mp_exact_kl(n, m, m0):
    lam, lam0 = mp.mpf(m) / n, mp.mpf(m0) / n
    return n * lam * mp.log(lam / lam0) + n * (1 - lam) * mp.log((1 - lam) / (1 - lam0))


def mp_bound(m, m0):
    m, m0 = mp.mpf(m), mp.mpf(m0)
    h = lambda x: 1 - x + x * x / 2      # noqa: E731
    return m * mp.log(m / m0) + (1 - m) * mp.log(h(m) / h(m0))


# frozen values (40-digit mpmath, rounded)
KL_N2_N1 = 0.1534264097200273
M_MU0_VAR0375 = 0.25
M_MU0_VAR05 = 0.2928932188134524
DELTA_F2_EDGE = 0.0210474545
DELTA_F2_01 = 0.004238854
EXACT_1000 = 0.1296036899
POISSON_03_01 = 0.1295836866
BOUND_03_01 = 0.1933982


def test_gaussian_kl_frozen():
    got = D.gaussian_kl(GaussianParams(0.0, 2.0), GaussianParams(0.0, 1.0))
    assert got == pytest.approx(KL_N2_N1, abs=1e-12)
    assert float(0.5 * (2 - 1 - mp.log(2))) == pytest.approx(KL_N2_N1, abs=1e-15)


def test_gaussian_kl_zero_on_identity():
    p = GaussianParams(0.3, 0.7)
    assert D.gaussian_kl(p, p) == 0.0


@pytest.mark.parametrize("mu,var,expected", [(0.0, 0.375, M_MU0_VAR0375),
                                             (0.0, 0.5, M_MU0_VAR05)])
def test_theorem1_frozen_values(mu, var, expected):
    assert D.theorem1_m(GaussianParams(mu, var)) == pytest.approx(expected, abs=1e-14)
    assert float(mp_m(mu, var)) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("mu", [-1.0, -0.5, 0.0, 0.2, 0.4])
@pytest.mark.parametrize("var", [0.05, 0.1, 0.25, 0.5, 1.0, 2.0])
def test_theorem1_matches_golden_section(mu, var):
    t = GaussianParams(mu, var)
    m = D.theorem1_m(t)
    assert 0 < m < 0.5
    assert abs(m - D.golden_argmin_f1(t)) <= 1e-6
    assert m == pytest.approx(float(mp_m(mu, var)), rel=1e-13)


def test_theorem1_rejects_upper_branch():
    with pytest.raises(DomainError):
        D.theorem1_m(GaussianParams(0.5, 1.0))
    with pytest.raises(DomainError):
        GaussianParams(0.0, 0.0)


def test_m_from_l_has_no_cancellation_for_tiny_l():
    for l in (1e-3, 1e-8, 1e-14):
        exact = float((1 + mp.mpf(l) - mp.sqrt(1 + mp.mpf(l) ** 2)) / 2)
        assert D.m_from_l(l) == pytest.approx(exact, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1e6))
def test_m_from_l_stays_in_open_half_interval(l):
    m = D.m_from_l(l)
    assert 0 < m < 0.5


def test_delta_f2_frozen():
    assert D.delta_f2(D.SQRT2_HALF_MINUS_HALF) == pytest.approx(DELTA_F2_EDGE, abs=1e-10)
    assert D.delta_f2(0.1) == pytest.approx(DELTA_F2_01, abs=1e-9)
    m = mp.sqrt(2) / 2 - mp.mpf(1) / 2
    assert float(mp.sqrt(1 - m) + 1 / (2 * (1 - m)) - mp.mpf(3) / 2) == pytest.approx(
        DELTA_F2_EDGE, abs=1e-10)


def test_delta_f2_monotone_on_dense_grid():
    xs = np.linspace(0, 0.5, 10_002)[1:-1]
    assert np.all(np.diff(D.delta_f2(xs)) > 0)
    assert D.delta_f2(1e-9) == pytest.approx(0.0, abs=1e-9)


def test_delta_f2_domain():
    with pytest.raises(DomainError):
        D.delta_f2(0.5)


def test_exact_and_limit_frozen():
    assert D.binomial_kl_exact(1000, 0.3e-3, 0.1e-3) == pytest.approx(EXACT_1000, abs=1e-10)
    assert float(mp_exact_kl(1000, 0.3, 0.1)) == pytest.approx(EXACT_1000, abs=1e-10)
    assert D.binomial_kl_poisson_limit(0.3, 0.1) == pytest.approx(POISSON_03_01, abs=1e-10)


def test_exact_converges_to_poisson_limit():
    lim = D.binomial_kl_poisson_limit(0.3, 0.1)
    gaps = [abs(D.binomial_kl_exact(n, 0.3 / n, 0.1 / n) - lim) for n in (10, 100, 1000, 10**6)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-6


def test_exact_kl_matches_scipy_sum():
    n, lam, lam0 = 50, 0.03, 0.07
    k = np.arange(n + 1)
    p, q = stats.binom.pmf(k, n, lam), stats.binom.pmf(k, n, lam0)
    direct = float(np.sum(p * np.log(p / q)))
    assert D.binomial_kl_exact(n, lam, lam0) == pytest.approx(direct, rel=1e-10)


def test_bound_frozen():
    assert D.binomial_kl_bound(0.3, 0.1) == pytest.approx(BOUND_03_01, abs=1e-7)
    assert float(mp_bound(0.3, 0.1)) == pytest.approx(BOUND_03_01, abs=1e-7)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-4, 0.4999), st.floats(1e-4, 0.4999),
       st.sampled_from([1_000, 10_000, 1_000_000]))
def test_bound_dominates_exact(a, b, n):
    m, m0 = max(a, b), min(a, b)
    assume(m - m0 > 1e-9)
    assert D.binomial_kl_exact(n, m / n, m0 / n) < D.binomial_kl_bound(m, m0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 0.4999))
def test_bound_zero_on_diagonal(m):
    assert D.binomial_kl_bound(m, m) == 0.0


def test_bound_vectorised_and_domain():
    out = D.binomial_kl_bound(np.array([0.3, 0.2]), np.array([0.1, 0.2]))
    assert out.shape == (2,) and out[1] == 0.0
    with pytest.raises(DomainError):
        D.binomial_kl_bound(0.6, 0.1)


def test_binomial_spec_contract():
    s = D.BinomialSpec(0.2, 1000)
    assert s.lam == pytest.approx(2e-4)
    assert s.proxy().var == pytest.approx(0.16)
    with pytest.raises(DomainError):
        D.BinomialSpec(0.5)
    with pytest.raises(DomainError):
        D.BinomialSpec(0.2, 0)


# frozen CDF gaps with the half-integer continuity correction (n = 10^4)
PROXY_GAPS = {0.05: 0.029297, 0.2: 0.045356, 0.4: 0.089443}


@pytest.mark.parametrize("m", sorted(PROXY_GAPS))
def test_proxy_cdf_gap_frozen(m):
    assert D.proxy_cdf_gap(m, 10_000) == pytest.approx(PROXY_GAPS[m], abs=2e-6)


def test_proxy_gap_first_step_oracle():
    # the gap at k = 0 alone: P(B = 0) vs Phi((0.5 - m) / sqrt(m (1 - m)))
    m, n = 0.4, 10_000
    p0 = (1 - m / n) ** n
    g0 = 0.5 * (1 + math.erf((0.5 - m) / math.sqrt(2 * m * (1 - m))))
    assert D.proxy_cdf_gap(m, n) >= abs(p0 - g0) - 1e-12


def test_proxy_gap_without_correction_is_larger():
    assert D.proxy_cdf_gap(0.2, 10_000, continuity=False) > 0.4
