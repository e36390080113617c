"""Effect estimation from unit-level endpoints.

Each analysis unit contributes one row ``(arm, adjusters, endpoint)``.  The
arm-specific means ``phi(a) = E{E(endpoint | A=a, adjusters)}`` are
estimated by TMLE with a two-dimensional clever covariate, contrasted on the
ratio or difference scale, and given influence-curve standard errors with a
Student t multiplier (K - 2 df) below 40 units.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from .data_model import AnalysisConfig, UnitData
from .learners import P_MIN, LearnerSpec, clip_prob, fit_learner, predict
from .stage1 import EndpointEstimate, Stage1Error, estimate_endpoints
from .super_learner import sl_fit, sl_predict
from .targeting import fluctuate_covariates, publish_influence

T_CUTOFF = 40
MIN_UNITS = 4
ARM = "A"


class Stage2Error(RuntimeError):
    pass


@dataclass(frozen=True)
class UnitRow:
    unit_id: str
    arm: int
    adjusters: Mapping[str, float]
    endpoint: float


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    scale: str
    point: float
    log_point: float | None
    se: float
    ci_lower: float
    ci_upper: float
    df_rule: str
    df: int | None
    multiplier: float
    p_value: float
    phi1: float
    phi0: float
    n_units: int
    ic_values: np.ndarray
    unit_ids: tuple[str, ...]
    selection: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "scale": self.scale,
            "point": self.point,
            "log_point": self.log_point,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "df_rule": self.df_rule,
            "df": self.df,
            "multiplier": self.multiplier,
            "p_value": self.p_value,
            "phi1": self.phi1,
            "phi0": self.phi0,
            "n_units": self.n_units,
            "ic_values": {u: float(d) for u, d in zip(self.unit_ids, self.ic_values)},
            "selection": self.selection,
        }


def rows_from_estimates(units: Sequence[UnitData], estimates: Sequence[EndpointEstimate]) -> list[UnitRow]:
    return [UnitRow(u.unit_id, u.arm, dict(u.unit_covariates), e.endpoint) for u, e in zip(units, estimates)]


def ci_multiplier(k: int, level: float = 0.95) -> tuple[float, str, int | None]:
    """Wald multiplier: t with k - 2 df when k < 40, else standard normal."""
    q = 0.5 + level / 2.0
    if k < T_CUTOFF:
        return float(stats.t.ppf(q, k - 2)), "t_nminus2", k - 2
    return float(stats.norm.ppf(q)), "normal", None


@dataclass(frozen=True)
class _Nuisance:
    """Initial predictions for one unit set."""

    q_obs: np.ndarray
    q1: np.ndarray
    q0: np.ndarray
    g1: np.ndarray


def _arm_covs(covs: Mapping[str, np.ndarray], a) -> dict[str, np.ndarray]:
    out = dict(covs)
    n = len(next(iter(covs.values()))) if covs else len(np.atleast_1d(a))
    out[ARM] = np.broadcast_to(np.asarray(a, dtype=float), (n,)).copy()
    return out


def _q_glm(covs, y, a, names):
    """Quasi-binomial working GLM of the endpoint on the arm plus ``names``."""
    spec = LearnerSpec("main_terms_logistic", (ARM, *names))
    return fit_learner(spec, _arm_covs(covs, a), y)


def _predict_q(fit, covs, n):
    return (predict(fit, _arm_covs(covs, 1.0) if covs else {ARM: np.ones(n)}, n=n),
            predict(fit, _arm_covs(covs, 0.0) if covs else {ARM: np.zeros(n)}, n=n))


def _targeted(y, a, nz: _Nuisance, g_bound: float):
    g1 = np.clip(nz.g1, g_bound, 1.0 - g_bound)
    H = np.column_stack([a / g1, (1.0 - a) / (1.0 - g1)])
    fl = fluctuate_covariates(y, nz.q_obs, H, label="stage2")
    eps = fl.epsilon
    q1s = _update(nz.q1, eps[0] / g1)
    q0s = _update(nz.q0, eps[1] / (1.0 - g1))
    return q1s, q0s, g1, eps, fl


def _update(q, shift):
    return expit(logit(clip_prob(q)) + shift)


def _influence(y, a, g1, q1s, q0s, phi1, phi0, scale):
    d1 = a / g1 * (y - q1s) + q1s - phi1
    d0 = (1.0 - a) / (1.0 - g1) * (y - q0s) + q0s - phi0
    if scale == "risk_ratio":
        return d1 / phi1 - d0 / phi0
    return d1 - d0


def _rows_arrays(rows: Sequence[UnitRow], names: Sequence[str]):
    y = np.array([r.endpoint for r in rows], dtype=float)
    a = np.array([r.arm for r in rows], dtype=float)
    covs = {c: np.array([float(r.adjusters[c]) for r in rows]) for c in names}
    return y, a, covs


def _glm_nuisance(train, test, q_names, g_spec, known_g):
    """Fit the working GLMs on ``train`` and predict on ``test``.

    ``train``/``test`` are ``(y, a, covs)`` triples.
    """
    y, a, covs = train
    yt, at, covst = test
    nt = len(yt)
    q_fit = _q_glm({c: covs[c] for c in q_names}, y, a, q_names)
    qcov_t = {c: covst[c] for c in q_names}
    q1, q0 = _predict_q(q_fit, qcov_t, nt)
    q_obs = np.where(at == 1, q1, q0)
    if known_g is not None:
        g1 = np.full(nt, float(known_g))
    else:
        g_fit = fit_learner(g_spec, {c: covs[c] for c in g_spec.covariates}, a)
        g1 = predict(g_fit, {c: covst[c] for c in g_spec.covariates}, n=nt)
    return _Nuisance(q_obs, q1, q0, g1)


def _g_spec(names: Sequence[str]) -> LearnerSpec:
    if not names:
        return LearnerSpec("intercept_only_mean")
    return LearnerSpec("main_terms_logistic", tuple(names))


def _fold_ids(unit_ids: Sequence[str], k: int, config: AnalysisConfig) -> np.ndarray:
    if k < T_CUTOFF:
        return np.arange(k)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(7,)))
    folds = np.empty(k, dtype=np.int64)
    folds[rng.permutation(k)] = np.arange(k) % config.cv_folds
    return folds


def _cv_ic_variance(y, a, covs, q_names, g_names, config, folds) -> float:
    g_spec = _g_spec(g_names)
    d_val = np.empty(len(y))
    for f in np.unique(folds):
        te = folds == f
        tr = ~te
        train = (y[tr], a[tr], {c: x[tr] for c, x in covs.items()})
        if len(np.unique(a[tr])) < 2:
            return np.inf
        test = (y[te], a[te], {c: x[te] for c, x in covs.items()})
        nz_tr = _glm_nuisance(train, train, q_names, g_spec, config.stage2_known_g)
        q1s, q0s, _, eps, _ = _targeted(train[0], train[1], nz_tr, config.g_bound)
        phi1, phi0 = float(q1s.mean()), float(q0s.mean())
        if config.effect_scale == "risk_ratio" and (phi1 <= 0 or phi0 <= 0):
            return np.inf
        nz_te = _glm_nuisance(train, test, q_names, g_spec, config.stage2_known_g)
        g1 = np.clip(nz_te.g1, config.g_bound, 1.0 - config.g_bound)
        q1v = _update(nz_te.q1, eps[0] / g1)
        q0v = _update(nz_te.q0, eps[1] / (1.0 - g1))
        d_val[te] = _influence(test[0], test[1], g1, q1v, q0v, phi1, phi0, config.effect_scale)
    return float(np.mean(d_val ** 2))


def adaptive_prespecification(
    rows: Sequence[UnitRow],
    candidate_q: Sequence[Sequence[str]],
    candidate_g: Sequence[Sequence[str]],
    config: AnalysisConfig,
) -> dict:
    """Pick the (outcome GLM, propensity GLM) pair with the smallest cross-validated IC variance.

    Candidates are covariate-name tuples, ``()`` meaning unadjusted; the
    arm always enters the outcome GLM.  Folds are leave-one-out below 40
    units.  Ties go to the earlier candidate.
    """
    rows = sorted(rows, key=lambda r: r.unit_id)
    names = sorted({c for cand in list(candidate_q) + list(candidate_g) for c in cand})
    y, a, covs = _rows_arrays(rows, names)
    folds = _fold_ids([r.unit_id for r in rows], len(rows), config)
    g_list = [()] if config.stage2_known_g is not None else [tuple(g) for g in candidate_g]
    best, best_var = None, np.inf
    table = []
    for qn in candidate_q:
        for gn in g_list:
            v = _cv_ic_variance(y, a, covs, tuple(qn), tuple(gn), config, folds)
            table.append({"q": list(qn), "g": list(gn), "cv_variance": v})
            if v < best_var:
                best, best_var = (tuple(qn), tuple(gn)), v
    if best is None:
        best = ((), ())
    return {
        "method": "adaptive_prespecification",
        "q": list(best[0]),
        "g": "known" if config.stage2_known_g is not None else list(best[1]),
        "cv_variance": best_var,
        "candidates": table,
    }


def _stage2_seed(config: AnalysisConfig, which: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(config.seed, spawn_key=(11, which))


def _sl_nuisance(y, a, covs, names, config):
    n = len(y)
    qcands = [LearnerSpec("main_terms_logistic", (ARM,))]
    if names:
        qcands.append(LearnerSpec("main_terms_logistic", (ARM, *names)))
    q_sl = sl_fit(_arm_covs(covs, a), y, qcands, folds=config.cv_folds, loss="squared_error",
                  seed=_stage2_seed(config, 0), restarts=config.sl_restarts)
    q1 = sl_predict(q_sl, _arm_covs(covs, 1.0) if covs else {ARM: np.ones(n)}, n=n)
    q0 = sl_predict(q_sl, _arm_covs(covs, 0.0) if covs else {ARM: np.zeros(n)}, n=n)
    gcands = [LearnerSpec("intercept_only_mean")]
    if names:
        gcands.append(LearnerSpec("main_terms_logistic", tuple(names)))
    g_sl = sl_fit(covs, a, gcands, folds=config.cv_folds, loss="log_loss",
                  seed=_stage2_seed(config, 1), restarts=config.sl_restarts)
    g1 = sl_predict(g_sl, covs, n=n)
    sel = {"method": "super_learner", "outcome": q_sl.description, "propensity": g_sl.description}
    return _Nuisance(np.where(a == 1, q1, q0), q1, q0, g1), sel


def _adjuster_names(rows: Sequence[UnitRow], config: AnalysisConfig) -> list[str]:
    if config.stage2_adjustment is not None:
        names = list(config.stage2_adjustment)
        missing = [c for c in names if any(c not in r.adjusters for r in rows)]
        if missing:
            raise Stage2Error(f"unit rows lack adjuster(s) {missing}")
        return names
    return list(rows[0].adjusters) if rows else []


def tmle_effect(rows: Sequence[UnitRow], config: AnalysisConfig, level: float = 0.95) -> EffectEstimate:
    """TMLE of the arm contrast from unit-level endpoints.

    ``config.stage2_mode`` picks the nuisance estimators: ``randomized`` runs
    adaptive pre-specification over single-adjuster working GLMs,
    ``pseudo_observational`` uses Super Learner for the outcome regression and
    the propensity, ``unadjusted`` uses arm means and the arm share.
    """
    rows = sorted(rows, key=lambda r: r.unit_id)
    k = len(rows)
    if k < MIN_UNITS:
        raise Stage2Error(f"need at least {MIN_UNITS} units, got {k}")
    arms = {r.arm for r in rows}
    if arms != {0, 1}:
        raise Stage2Error("both arms must be present")
    y = np.array([r.endpoint for r in rows], dtype=float)
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise Stage2Error("endpoints must lie in [0, 1]")

    mode = config.stage2_mode
    names = [] if mode == "unadjusted" else _adjuster_names(rows, config)
    y, a, covs = _rows_arrays(rows, names)
    if mode == "pseudo_observational":
        nz, selection = _sl_nuisance(y, a, covs, names, config)
    else:
        if mode == "randomized":
            cands = [()] + [(c,) for c in names]
            selection = adaptive_prespecification(rows, cands, cands, config)
            q_names = tuple(selection["q"])
            g_names = () if config.stage2_known_g is not None else tuple(selection["g"])
        else:
            q_names, g_names = (), ()
            selection = {"method": "unadjusted", "q": [], "g": []}
        data = (y, a, covs)
        known = config.stage2_known_g if mode == "randomized" else None
        nz = _glm_nuisance(data, data, q_names, _g_spec(g_names), known)

    q1s, q0s, g1, eps, fl = _targeted(y, a, nz, config.g_bound)
    phi1, phi0 = float(q1s.mean()), float(q0s.mean())
    scale = config.effect_scale
    # targeted means are clipped away from 0, so a clipped arm mean counts as 0
    if scale == "risk_ratio" and phi0 <= 2 * P_MIN:
        raise Stage2Error("estimated control-arm mean is 0; ratio undefined")
    if scale == "risk_ratio" and phi1 <= 2 * P_MIN:
        raise Stage2Error("estimated treated-arm mean is 0; log ratio undefined")
    ic = _influence(y, a, g1, q1s, q0s, phi1, phi0, scale)
    publish_influence(f"stage2:{mode}", ic)
    se = float(np.sqrt(np.var(ic, ddof=1) / k))
    mult, rule, df = ci_multiplier(k, level)
    if scale == "risk_ratio":
        log_point = float(np.log(phi1) - np.log(phi0))
        point = float(np.exp(log_point))
        lo, hi = np.exp(log_point - mult * se), np.exp(log_point + mult * se)
        stat = log_point / se if se > 0 else (0.0 if log_point == 0 else np.inf)
    else:
        log_point = None
        point = phi1 - phi0
        lo, hi = point - mult * se, point + mult * se
        stat = point / se if se > 0 else (0.0 if point == 0 else np.inf)
    if df is None:
        p = float(2 * stats.norm.sf(abs(stat)))
    else:
        p = float(2 * stats.t.sf(abs(stat), df))
    selection = dict(selection, epsilon=[float(e) for e in eps])
    return EffectEstimate(
        scale=scale, point=point, log_point=log_point, se=se, ci_lower=float(lo), ci_upper=float(hi),
        df_rule=rule, df=df, multiplier=mult, p_value=p, phi1=phi1, phi0=phi0, n_units=k,
        ic_values=ic, unit_ids=tuple(r.unit_id for r in rows), selection=selection,
    )


# label, key assumptions, unit level, stage 1 adjusted, stage 2 mode
SENSITIVITY_ROWS = (
    ("Stage 1 adjusted; Stage 2 adjusted; partition as the independent unit",
     "Individual-level outcomes are missing at random (MAR) given the Stage 1 adjustment set. "
     "Partition-level outcomes are conditionally independent given the partition-level covariates.",
     "partition", True, "pseudo_observational"),
    ("Stage 1 adjusted; Stage 2 adjusted; cluster as the independent unit",
     "Individual-level outcomes are MAR given the Stage 1 adjustment set. "
     "Stage 2 adjustment selected by adaptive pre-specification.",
     "cluster", True, "randomized"),
    ("Stage 1 adjusted; Stage 2 unadjusted; partition as the independent unit",
     "Individual-level outcomes are MAR given the Stage 1 adjustment set. "
     "Partition-level outcomes are (marginally) independent.",
     "partition", True, "unadjusted"),
    ("Stage 1 unadjusted; Stage 2 adjusted; partition as the independent unit",
     "Individual-level outcomes are missing completely at random (MCAR). "
     "Partition-level outcomes are conditionally independent given the partition-level covariates.",
     "partition", False, "pseudo_observational"),
    ("Stage 1 unadjusted; Stage 2 unadjusted; partition as the independent unit",
     "Individual-level outcomes are MCAR. Partition-level outcomes are (marginally) independent.",
     "partition", False, "unadjusted"),
)


@dataclass(frozen=True, eq=False)
class SensitivityRow:
    estimator: str
    assumptions: str
    config: AnalysisConfig
    estimate: EffectEstimate | None
    endpoints: tuple[EndpointEstimate, ...] = ()
    error: str | None = None


def sensitivity_configs(config: AnalysisConfig) -> list[AnalysisConfig]:
    """The five grid configurations derived from a fully adjusted base config."""
    if not config.stage1_adjusted:
        raise ValueError("the base config must carry a Stage 1 adjustment set")
    out = []
    for _, _, level, s1, mode in SENSITIVITY_ROWS:
        out.append(config.replace(
            unit_level=level,
            stage1_adjustment=config.stage1_adjustment if s1 else "unadjusted",
            stage1_adjustment_l1=config.stage1_adjustment_l1 if s1 else (),
            stage2_mode=mode,
        ))
    return out


def sensitivity_grid(units_by_level: Mapping[str, Sequence[UnitData]], config: AnalysisConfig,
                     threads: int = 1) -> list[SensitivityRow]:
    """Run the five-row sensitivity grid; a failing row is reported and the others proceed."""
    cache: dict = {}
    out = []
    for (label, assumptions, level, _, _), cfg in zip(SENSITIVITY_ROWS, sensitivity_configs(config)):
        units = units_by_level[level]
        key = (level, cfg.stage1_adjustment, cfg.stage1_adjustment_l1)
        try:
            if key not in cache:
                cache[key] = estimate_endpoints(units, cfg, threads=threads)
            ests = cache[key]
            eff = tmle_effect(rows_from_estimates(units, ests), cfg)
            out.append(SensitivityRow(label, assumptions, cfg, eff, tuple(ests)))
        except (Stage1Error, Stage2Error, ValueError, np.linalg.LinAlgError) as exc:
            out.append(SensitivityRow(label, assumptions, cfg, None, error=f"{type(exc).__name__}: {exc}"))
    return out
