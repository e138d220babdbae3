"""Check grid for the closed forms in :mod:`dgprtn.distributions`.

Every check compares a closed form against an independent route (numeric
optimisation, exact finite-n evaluation, the Binomial CDF) and yields one
:class:`CheckRow`. Groups can be run separately.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import distributions as D
from .numcore import DomainError, Rng

GROUPS = ("theorem1", "theorem2", "delta_f2", "proxy")

THEOREM1_MU = (-1.0, -0.5, 0.0, 0.2, 0.4)
THEOREM1_VAR = (0.05, 0.1, 0.25, 0.5, 1.0, 2.0)
THEOREM2_N = (1_000, 10_000, 1_000_000)
PROXY_M = (0.05, 0.2, 0.4)

# double-precision reference values
BOUND_03_01 = 0.193394
EXACT_1000_03_01 = 0.129604
DELTA_F2_AT_EDGE = 0.021047


@dataclass(frozen=True)
class CheckRow:
    name: str
    inputs: str
    expected: str
    got: str
    passed: bool


def theorem1_rows(perturb: float = 0.0) -> list[CheckRow]:
    rows = []
    for mu, var in itertools.product(THEOREM1_MU, THEOREM1_VAR):
        target = D.GaussianParams(mu, var)
        ref = D.golden_argmin_f1(target)
        got = D.theorem1_m(target) + perturb
        rows.append(CheckRow("theorem1_argmin", f"mu={mu};var={var}", f"{ref:.10f}",
                             f"{got:.10f}", abs(got - ref) <= 1e-6 and 0 < got < 0.5))
    return rows


def theorem2_rows(ns: Sequence[int] = THEOREM2_N, pairs: int = 1000, seed: int = 0
                  ) -> list[CheckRow]:
    rng = Rng(seed).split("theorem2")
    u = 1e-6 + (0.5 - 2e-6) * rng.uniform((pairs, 2))
    m, m0 = u.max(axis=1), u.min(axis=1)
    keep = m > m0
    m, m0 = m[keep], m0[keep]
    bound = D.binomial_kl_bound(m, m0)
    rows = []
    for n in ns:
        exact = np.array([D.binomial_kl_exact(n, a / n, b / n) for a, b in zip(m, m0)])
        held = int((exact < bound).sum())
        rows.append(CheckRow("theorem2_bound_holds", f"n={n};pairs={m.size}", f"{m.size}",
                             f"{held}", held == m.size))
    b = D.binomial_kl_bound(0.3, 0.1)
    rows.append(CheckRow("theorem2_bound_value", "m=0.3;m0=0.1", f"{BOUND_03_01}",
                         f"{b:.7f}", abs(b - BOUND_03_01) <= 1e-5))
    e = D.binomial_kl_exact(1000, 0.3 / 1000, 0.1 / 1000)
    rows.append(CheckRow("theorem2_exact_value", "n=1000;m=0.3;m0=0.1", f"{EXACT_1000_03_01}",
                         f"{e:.7f}", abs(e - EXACT_1000_03_01) <= 1e-5))
    return rows


def delta_f2_rows(grid: int = 10_000) -> list[CheckRow]:
    xs = np.linspace(0.0, 0.5, grid + 2)[1:-1]
    steps = np.diff(D.delta_f2(xs))
    v = D.delta_f2(D.SQRT2_HALF_MINUS_HALF)
    return [
        CheckRow("delta_f2_monotone", f"grid={grid}", "min step > 0",
                 f"{steps.min():.3e}", bool(np.all(steps > 0))),
        CheckRow("delta_f2_value", f"m={D.SQRT2_HALF_MINUS_HALF:.10f}", f"{DELTA_F2_AT_EDGE}",
                 f"{v:.10f}", abs(v - DELTA_F2_AT_EDGE) <= 1e-6),
    ]


def proxy_rows(n: int = 10_000, tol: float = 0.05) -> list[CheckRow]:
    rows = []
    for m in PROXY_M:
        gap = D.proxy_cdf_gap(m, n)
        rows.append(CheckRow("proxy_cdf_gap", f"m={m};n={n}", f"<= {tol}", f"{gap:.6f}",
                             gap <= tol))
    return rows


def run_checks(groups: Iterable[str] = GROUPS, extra_n: Sequence[int] = (),
               perturb: float = 0.0, seed: int = 0) -> list[CheckRow]:
    groups = list(groups)
    bad = [g for g in groups if g not in GROUPS]
    if bad:
        raise DomainError(f"unknown check group(s): {', '.join(bad)}")
    ns = tuple(dict.fromkeys((*THEOREM2_N, *extra_n)))
    for n in ns:
        if n < 1:
            raise DomainError(f"n must be >= 1, got {n}")
    rows: list[CheckRow] = []
    if "theorem1" in groups:
        rows += theorem1_rows(perturb)
    if "theorem2" in groups:
        rows += theorem2_rows(ns, seed=seed)
    if "delta_f2" in groups:
        rows += delta_f2_rows()
    if "proxy" in groups:
        rows += proxy_rows()
    return rows


def all_passed(rows: Sequence[CheckRow]) -> bool:
    return bool(rows) and all(r.passed for r in rows)

