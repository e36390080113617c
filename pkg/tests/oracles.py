"""Independent reference computations used to derive frozen test values.

Nothing here imports the estimation code: the stratification oracle works
from plain Python loops over records, and the t quantile integrates the
density directly.
"""
from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from scipy import integrate, optimize


def t_density(x: float, df: int) -> float:
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def t_quantile(q: float, df: int) -> float:
    """Quantile of Student's t by inverting the integrated density."""
    def cdf(x):
        return 0.5 + integrate.quad(t_density, 0.0, x, args=(df,), epsabs=1e-14, epsrel=1e-14)[0]

    return optimize.brentq(lambda x: cdf(x) - q, 0.0, 50.0, xtol=1e-14)


class EmptyStratum(ValueError):
    pass


def _mean(values):
    if not values:
        raise EmptyStratum("empty stratum")
    return sum(values) / len(values)


def stratified_endpoint(records: list[dict], l0: list[str], l1: list[str] = ()) -> dict:
    """Nonparametric plug-in of the identifying formulas by direct stratification.

    ``records`` are dicts with keys s, d0, y0, d1, y1 and the covariate names.
    Baseline prevalence averages P(Y0=1 | measured, l0) over the empirical
    distribution of l0 among everyone; incidence chains P(Y0=0 | measured, l0),
    the empirical distribution of l1 in the cohort stratum and
    P(Y1=1 | d1=1, cohort, l0, l1).
    """
    n = len(records)
    by_l0 = defaultdict(list)
    for r in records:
        by_l0[tuple(r[c] for c in l0)].append(r)
    den = num = 0.0
    for key, rows in by_l0.items():
        p_l0 = len(rows) / n
        measured = [r for r in rows if r["s"] == 1 and r["d0"] == 1]
        prev = _mean([r["y0"] for r in measured])
        cohort = [r for r in measured if r["y0"] == 0]
        by_l1 = defaultdict(list)
        for r in cohort:
            by_l1[tuple(r[c] for c in l1)].append(r)
        inner = 0.0
        for rows1 in by_l1.values():
            p_l1 = len(rows1) / len(cohort)
            inc = _mean([r["y1"] for r in rows1 if r["d1"] == 1])
            inner += p_l1 * inc
        den += p_l0 * prev
        num += p_l0 * (1.0 - prev) * inner
    return {"psi_den": den, "psi_num": num, "endpoint": num / (1.0 - den)}


def stratum_probabilities(records: list[dict], l0: list[str], l1: list[str] = ()) -> dict:
    """Smallest empirical measurement probabilities, to confirm a g bound does not bind."""
    g0 = defaultdict(list)
    for r in records:
        g0[tuple(r[c] for c in l0)].append(r["s"] * r["d0"])
    g1 = defaultdict(list)
    for r in records:
        if r["s"] == 1 and r["d0"] == 1 and r["y0"] == 0:
            g1[tuple(r[c] for c in list(l0) + list(l1))].append(r["d1"])
    return {"g0_min": min(_mean(v) for v in g0.values()),
            "g1_min": min(_mean(v) for v in g1.values())}


def arm_mean_contrast(endpoints: np.ndarray, arms: np.ndarray) -> tuple[float, float]:
    m1 = float(np.mean(endpoints[arms == 1]))
    m0 = float(np.mean(endpoints[arms == 0]))
    return m1 / m0, m1 - m0
