"""Per-unit endpoint estimation: baseline prevalence, joint incidence and their ratio.

For one unit (cluster or partition) the endpoint is

    endpoint = psi_num / (1 - psi_den)

where ``psi_den`` is the baseline prevalence standardised over the baseline
covariates of all participants and ``psi_num`` the proportion outcome-free at
baseline with the outcome at follow-up, obtained by iterated conditional
expectations under the regimes "sample and measure everyone at baseline" and
"measure every member of the incidence cohort at follow-up".  Both are TMLEs
built on Super Learner fits; the unadjusted variants are raw proportions
among those measured.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data_model import AnalysisConfig, UnitData
from .learners import LearnerSpec, MAX_SATURATED
from .super_learner import EnsembleFit, sl_fit, sl_predict
from .targeting import Fluctuation, fluctuate_weighted

CONSTRAINT_SLACK = 0.05

# spawn keys for the nuisance fits of one unit
_DEN_Q, _G0, _NUM_Q1, _NUM_G1, _NUM_Q0 = range(5)


class Stage1Error(RuntimeError):
    """Estimation of a unit's endpoint is impossible with the data at hand."""


@dataclass(frozen=True)
class EndpointEstimate:
    unit_id: str
    psi_den_hat: float
    psi_num_hat: float
    endpoint: float
    n_individuals: int
    n_sampled: int
    n_measured_baseline: int
    n_cohort: int
    n_measured_followup: int
    min_measurement_prob: float
    adjusted: bool
    g_bound_hits: int = 0
    flags: tuple[str, ...] = ()
    scores: tuple[float, ...] = ()
    learners: dict = field(default_factory=dict, compare=False)

    def as_dict(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "psi_den_hat": self.psi_den_hat,
            "psi_num_hat": self.psi_num_hat,
            "endpoint": self.endpoint,
            "n_individuals": self.n_individuals,
            "n_sampled": self.n_sampled,
            "n_measured_baseline": self.n_measured_baseline,
            "n_cohort": self.n_cohort,
            "n_measured_followup": self.n_measured_followup,
            "min_measurement_prob": self.min_measurement_prob,
            "adjusted": self.adjusted,
            "g_bound_hits": self.g_bound_hits,
            "flags": list(self.flags),
        }


def seed_name(unit: UnitData) -> str:
    """Name keying a unit's random streams: its member partitions.

    A cluster made of one partition gets the same streams as that partition,
    so both unit levels give identical fits on such data.
    """
    pairs = sorted({f"{c}/{p}" for c, p in zip(unit.cluster_id, unit.partition_id)})
    return "|".join(pairs)


def unit_seed(seed: int, name: str, component: int) -> np.random.SeedSequence:
    """Seed for one nuisance fit, keyed on the unit's name rather than its position."""
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                  spawn_key=(zlib.crc32(name.encode("utf-8")), component))


def candidate_library(names: Sequence[str], covs: dict[str, np.ndarray], kinds: Sequence[str]) -> list[LearnerSpec]:
    """Candidates for one regression on covariates ``names``.

    ``saturated_logistic`` uses the binary covariates only and is dropped when
    there are none or more than four of them; learners with covariates are
    dropped for an empty adjustment set.
    """
    out = []
    for kind in kinds:
        if kind == "intercept_only_mean":
            out.append(LearnerSpec(kind))
        elif kind == "saturated_logistic":
            binary = [c for c in names if np.all((covs[c] == 0) | (covs[c] == 1))]
            if 1 <= len(binary) <= MAX_SATURATED:
                out.append(LearnerSpec(kind, tuple(binary)))
        elif names:
            out.append(LearnerSpec(kind, tuple(names)))
    if not out:
        out.append(LearnerSpec("intercept_only_mean"))
    # drop exact duplicates, keep declaration order
    seen, uniq = set(), []
    for spec in out:
        if spec not in seen:
            seen.add(spec)
            uniq.append(spec)
    return uniq


def _subset(covs: dict[str, np.ndarray], mask: np.ndarray) -> dict[str, np.ndarray]:
    return {c: x[mask] for c, x in covs.items()}


@dataclass
class _Fit:
    """Working state for one TMLE component."""

    estimate: float = np.nan
    g_min: float = 1.0
    g_hits: int = 0
    flags: list[str] = field(default_factory=list)
    flucts: list[Fluctuation] = field(default_factory=list)
    learners: dict = field(default_factory=dict)


def _fit_sl(unit, covs, y, names, config, seed, loss="log_loss") -> EnsembleFit:
    # binary-ness is judged on the whole unit so subset fits predict everywhere
    cands = candidate_library(names, unit.columns(names), config.stage1_learners)
    return sl_fit(covs, y, cands, folds=config.cv_folds, loss=loss, seed=seed,
                  restarts=config.sl_restarts)


def _check_adjustment(unit: UnitData, names: Sequence[str], prefix: str) -> None:
    bad = [c for c in names if not c.startswith(prefix)]
    if bad:
        raise ValueError(f"adjustment covariates must be {prefix}* columns, got {bad}")
    unit.columns(names)


def _baseline_measurement(unit: UnitData, adj: Sequence[str], config: AnalysisConfig):
    """Fit P(S=1, d0=1 | L0) on all participants of the unit."""
    covs = unit.columns(adj)
    a0 = ((unit.s == 1) & (unit.d0 == 1)).astype(float)
    g_fit = _fit_sl(unit, covs, a0, adj, config, unit_seed(config.seed, seed_name(unit), _G0))
    return g_fit, sl_predict(g_fit, covs, n=len(unit))


def _denominator(unit: UnitData, adj: Sequence[str], config: AnalysisConfig, g0=None) -> _Fit:
    _check_adjustment(unit, adj, "l0_")
    out = _Fit()
    n = len(unit)
    a0 = (unit.s == 1) & (unit.d0 == 1)
    if not a0.any():
        raise Stage1Error(f"unit {unit.unit_id!r}: nobody measured at baseline")
    covs = unit.columns(adj)
    y = unit.y0.astype(float)

    q_fit = _fit_sl(unit, _subset(covs, a0), y[a0], adj, config, unit_seed(config.seed, seed_name(unit), _DEN_Q))
    q = sl_predict(q_fit, covs, n=n)
    if g0 is None:
        g_fit, g0 = _baseline_measurement(unit, adj, config)
        out.learners["baseline_measurement"] = g_fit.description
    gb = np.maximum(g0, config.g_bound)
    out.g_min = float(g0.min())
    out.g_hits = int(np.sum(a0 & (g0 < config.g_bound)))
    h = np.where(a0, 1.0 / gb, 0.0)

    fl = fluctuate_weighted(y, q, h, label=f"{unit.unit_id}:psi_den")
    if fl.skipped:
        out.flags.append("psi_den: constant baseline outcome among measured, fluctuation skipped")
    out.flucts.append(fl)
    out.learners["baseline_outcome"] = q_fit.description
    out.estimate = float(np.mean(fl.targeted))
    return out


def _numerator(unit: UnitData, adj0: Sequence[str], adj1: Sequence[str], config: AnalysisConfig,
               g0=None) -> _Fit:
    _check_adjustment(unit, adj0, "l0_")
    _check_adjustment(unit, adj1, "l1_")
    out = _Fit()
    n = len(unit)
    a0 = (unit.s == 1) & (unit.d0 == 1)
    cohort = a0 & (unit.y0 == 0)
    if not cohort.any():
        raise Stage1Error(f"unit {unit.unit_id!r}: empty incidence cohort")
    measured = cohort & (unit.d1 == 1)
    if not measured.any():
        raise Stage1Error(f"unit {unit.unit_id!r}: no cohort member measured at follow-up")

    names1 = list(adj0) + list(adj1)
    covs0 = unit.columns(adj0)
    covs1 = unit.columns(names1)
    c_covs1 = _subset(covs1, cohort)
    n_c = int(cohort.sum())

    # inner regression: follow-up outcome among the measured cohort
    q1_fit = _fit_sl(unit, _subset(covs1, measured), unit.y1[measured].astype(float), names1, config,
                     unit_seed(config.seed, seed_name(unit), _NUM_Q1))
    q1 = sl_predict(q1_fit, c_covs1, n=n_c)
    g1_fit = _fit_sl(unit, c_covs1, unit.d1[cohort].astype(float), names1, config,
                     unit_seed(config.seed, seed_name(unit), _NUM_G1))
    g1 = sl_predict(g1_fit, c_covs1, n=n_c)
    if g0 is None:
        g_fit, g0 = _baseline_measurement(unit, adj0, config)
        out.learners["baseline_measurement"] = g_fit.description
    g0b = np.maximum(g0, config.g_bound)
    g1b = np.maximum(g1, config.g_bound)
    out.g_min = float(min(g0.min(), g1.min()))
    out.g_hits = int(np.sum(a0 & (g0 < config.g_bound)) + np.sum((unit.d1[cohort] == 1) & (g1 < config.g_bound)))

    h1 = unit.d1[cohort] / (g0b[cohort] * g1b)
    fl1 = fluctuate_weighted(unit.y1[cohort].astype(float), q1, h1, label=f"{unit.unit_id}:psi_num:followup")
    if fl1.skipped:
        out.flags.append("psi_num: constant follow-up outcome among measured cohort, fluctuation skipped")

    # pseudo-outcome: targeted follow-up prediction in the cohort, 0 for baseline cases
    z = np.zeros(n)
    z[cohort] = fl1.targeted
    q0_fit = _fit_sl(unit, _subset(covs0, a0), z[a0], adj0, config, unit_seed(config.seed, seed_name(unit), _NUM_Q0))
    q0 = sl_predict(q0_fit, covs0, n=n)
    h0 = np.where(a0, 1.0 / g0b, 0.0)
    fl0 = fluctuate_weighted(z, q0, h0, label=f"{unit.unit_id}:psi_num:baseline")
    if fl0.skipped:
        out.flags.append("psi_num: constant pseudo-outcome, fluctuation skipped")

    out.flucts.extend([fl1, fl0])
    out.learners.update({
        "followup_outcome": q1_fit.description,
        "followup_measurement": g1_fit.description,
        "pseudo_outcome": q0_fit.description,
    })
    out.estimate = float(np.mean(fl0.targeted))
    return out


def tmle_denominator(unit: UnitData, adjustment: Sequence[str], config: AnalysisConfig) -> float:
    """TMLE of the baseline prevalence standardised to all participants of the unit.

    Parameters
    ----------
    unit : UnitData
    adjustment : sequence of str
        ``l0_`` columns the sampling, measurement and outcome depend on.
    config : AnalysisConfig
        Supplies the learner library, V, g bound and seed.
    """
    return _denominator(unit, list(adjustment), config).estimate


def tmle_numerator(unit: UnitData, adjustment_l0: Sequence[str], adjustment_l1: Sequence[str],
                   config: AnalysisConfig) -> float:
    """Longitudinal TMLE of P(outcome at follow-up, outcome-free at baseline)."""
    return _numerator(unit, list(adjustment_l0), list(adjustment_l1), config).estimate


def _counts(unit: UnitData) -> dict:
    cohort = unit.cohort_mask()
    return dict(
        n_individuals=len(unit),
        n_sampled=int(unit.s.sum()),
        n_measured_baseline=int(unit.d0.sum()),
        n_cohort=int(cohort.sum()),
        n_measured_followup=int((cohort & (unit.d1 == 1)).sum()),
    )


def unadjusted_endpoint(unit: UnitData) -> EndpointEstimate:
    """Raw proportions: baseline prevalence among the measured, incidence among the measured cohort."""
    counts = _counts(unit)
    if counts["n_measured_baseline"] == 0:
        raise Stage1Error(f"unit {unit.unit_id!r}: nobody measured at baseline")
    if counts["n_measured_followup"] == 0:
        raise Stage1Error(f"unit {unit.unit_id!r}: no cohort member measured at follow-up")
    den = float(unit.y0[unit.d0 == 1].mean())
    measured = unit.cohort_mask() & (unit.d1 == 1)
    incidence = float(unit.y1[measured].mean())
    return EndpointEstimate(
        unit_id=unit.unit_id, psi_den_hat=den, psi_num_hat=incidence * (1.0 - den), endpoint=incidence,
        min_measurement_prob=float("nan"), adjusted=False, **counts,
    )


def estimate_endpoint(unit: UnitData, config: AnalysisConfig) -> EndpointEstimate:
    """Estimate one unit's endpoint, adjusted or raw per ``config.stage1_adjustment``."""
    if not config.stage1_adjusted:
        return unadjusted_endpoint(unit)
    adj0 = list(config.stage1_adjustment)
    adj1 = list(config.stage1_adjustment_l1)
    _check_adjustment(unit, adj0, "l0_")
    g_fit, g0 = _baseline_measurement(unit, adj0, config)
    den = _denominator(unit, adj0, config, g0=g0)
    num = _numerator(unit, adj0, adj1, config, g0=g0)
    if den.estimate >= 1.0:
        raise Stage1Error(f"unit {unit.unit_id!r}: estimated baseline prevalence is 1")
    flags = den.flags + num.flags
    if num.estimate > 1.0 - den.estimate + CONSTRAINT_SLACK:
        flags.append("psi_num exceeds 1 - psi_den by more than the slack")
    learners = {"baseline_measurement": g_fit.description, **den.learners, **num.learners}
    return EndpointEstimate(
        unit_id=unit.unit_id,
        psi_den_hat=den.estimate,
        psi_num_hat=num.estimate,
        endpoint=num.estimate / (1.0 - den.estimate),
        min_measurement_prob=min(den.g_min, num.g_min),
        adjusted=True,
        g_bound_hits=den.g_hits + num.g_hits,
        flags=tuple(flags),
        scores=tuple(float(np.max(np.abs(f.score))) for f in den.flucts + num.flucts),
        learners=learners,
        **_counts(unit),
    )


def estimate_endpoints(units: Sequence[UnitData], config: AnalysisConfig, threads: int = 1) -> list[EndpointEstimate]:
    """Estimate every unit independently; results follow the order of ``units``."""
    if threads == 1 or len(units) < 2:
        return [estimate_endpoint(u, config) for u in units]
    from .parallel import pool_map

    return pool_map(estimate_endpoint, units, threads, config)
