"""V-fold cross-validated convex ensembles of :class:`~twostage_tmle.learners.LearnerSpec` candidates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .learners import P_MIN, Covariates, FittedLearner, LearnerSpec, clip_prob, fit_learner, predict

LOSSES = ("log_loss", "squared_error")
PGD_TOL = 1e-10
PGD_MAX_ITER = 2000
FOLD_REDRAWS = 20


class SuperLearnerError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EnsembleFit:
    """Convex combination of candidates refit on the full data.

    ``discrete`` is True when the meta step fell back to picking the single
    best candidate; ``degenerate`` is True when the outcome was constant and
    every candidate reduces to that constant.
    """

    specs: tuple[LearnerSpec, ...]
    candidates: tuple[FittedLearner | None, ...]
    weights: np.ndarray
    cv_risks: np.ndarray
    ensemble_cv_risk: float
    folds: np.ndarray
    n_folds: int
    loss: str
    discrete: bool = False
    degenerate: bool = False

    @property
    def description(self) -> dict:
        return {
            "candidates": [s.label for s in self.specs],
            "weights": [float(w) for w in self.weights],
            "cv_risks": [float(r) for r in self.cv_risks],
            "n_folds": int(self.n_folds),
            "discrete": bool(self.discrete),
            "degenerate": bool(self.degenerate),
        }


def _is_binary(y: np.ndarray) -> bool:
    return bool(np.all((y == 0) | (y == 1)))


def make_folds(y: np.ndarray, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded fold labels; stratified on ``y`` when ``y`` is binary."""
    n = len(y)
    folds = np.empty(n, dtype=np.int64)
    if _is_binary(y):
        start = 0
        for cls in (0, 1):
            idx = np.flatnonzero(y == cls)
            idx = idx[rng.permutation(len(idx))]
            folds[idx] = (start + np.arange(len(idx))) % n_folds
            start = (start + len(idx)) % n_folds
    else:
        folds[rng.permutation(n)] = np.arange(n) % n_folds
    return folds


def _folds_ok(y: np.ndarray, folds: np.ndarray, n_folds: int) -> bool:
    if not _is_binary(y):
        return True
    for v in range(n_folds):
        held = y[folds == v]
        if held.size == 0 or held.min() == held.max():
            return False
    return True


def _loss(y, p, loss):
    if loss == "log_loss":
        return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return (y - p) ** 2


def _risk(alpha, Z, y, w, loss):
    p = Z @ alpha
    return float(w @ _loss(y, p, loss))


def _grad(alpha, Z, y, w, loss):
    p = Z @ alpha
    if loss == "log_loss":
        d = -(y / p - (1.0 - y) / (1.0 - p))
    else:
        d = -2.0 * (y - p)
    return Z.T @ (w * d)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _pgd(alpha, Z, y, w, loss):
    f = _risk(alpha, Z, y, w, loss)
    step = 1.0
    for _ in range(PGD_MAX_ITER):
        g = _grad(alpha, Z, y, w, loss)
        while True:
            cand = project_simplex(alpha - step * g)
            diff = cand - alpha
            f_c = _risk(cand, Z, y, w, loss)
            if f_c <= f + g @ diff + (diff @ diff) / (2.0 * step) or step < 1e-20:
                break
            step *= 0.5
        done = f - f_c < PGD_TOL
        if f_c <= f:
            alpha, f = cand, f_c
        if done:
            break
        step *= 2.0
    return alpha, f


def meta_weights(Z: np.ndarray, y: np.ndarray, w: np.ndarray, loss: str, restarts: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Minimise the weighted CV loss of ``Z @ alpha`` over the simplex.

    Both losses are convex in ``alpha``, so projected gradient descent from
    the uniform weights finds the optimum; ``restarts`` extra seeded
    Dirichlet starts guard against a stalled run.  The vertices are
    evaluated too, so the result is never worse than the best candidate.
    """
    k = Z.shape[1]
    wn = w / w.sum()
    best_alpha, best_f = None, np.inf
    for j in range(k):
        e = np.zeros(k)
        e[j] = 1.0
        f = _risk(e, Z, y, wn, loss)
        if f < best_f:
            best_alpha, best_f = e, f
    if k > 1:
        starts = [np.full(k, 1.0 / k)] + [rng.dirichlet(np.ones(k)) for _ in range(restarts)]
        for a0 in starts:
            a, f = _pgd(a0, Z, y, wn, loss)
            if f < best_f:
                best_alpha, best_f = a, f
    best_alpha = np.maximum(best_alpha, 0.0)
    return best_alpha / best_alpha.sum(), best_f


def sl_fit(
    covs: Covariates,
    y: np.ndarray,
    candidates: Sequence[LearnerSpec],
    weights: np.ndarray | None = None,
    folds: int = 10,
    loss: str = "log_loss",
    seed: int | np.random.SeedSequence = 0,
    restarts: int = 10,
) -> EnsembleFit:
    """Fit a cross-validated convex ensemble.

    Parameters
    ----------
    covs : mapping of str to ndarray
        Covariate columns, one entry per row of ``y``.
    y : ndarray
        Responses in [0, 1].
    candidates : sequence of LearnerSpec
        Candidate library, in declaration order.
    weights : ndarray, optional
        Case weights applied in fitting and in the CV loss.
    folds : int
        Requested V; reduced to ``max(2, n // 2)`` when ``n < 2V``.
    loss : {"log_loss", "squared_error"}
    seed : int or SeedSequence
        Drives fold assignment and meta-learner restarts.
    restarts : int
        Extra random starts of the simplex optimiser (the first start is uniform).
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    if folds < 2:
        raise ValueError("folds must be at least 2")
    specs = tuple(candidates)
    if not specs:
        raise SuperLearnerError("no candidates")
    y = np.asarray(y, dtype=float)
    n = len(y)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)

    if n == 0:
        raise SuperLearnerError("no observations")
    if np.ptp(y) == 0:
        # constant outcome: every sensible candidate reduces to the constant
        spec = LearnerSpec("intercept_only_mean")
        fit = fit_learner(spec, covs, y, w)
        return EnsembleFit((spec,), (fit,), np.array([1.0]), np.array([0.0]), 0.0,
                           np.zeros(n, dtype=np.int64), 0, loss, degenerate=True)

    if len(specs) == 1:
        fit = fit_learner(specs[0], covs, y, w)
        return EnsembleFit(specs, (fit,), np.array([1.0]), np.array([np.nan]), np.nan,
                           np.zeros(n, dtype=np.int64), 0, loss)

    v = folds if n >= 2 * folds else max(2, n // 2)
    fold_ids = make_folds(y, v, rng)
    discrete = False
    if _is_binary(y) and min(int(y.sum()), n - int(y.sum())) < v:
        # stratified folds cannot all hold both classes; redrawing cannot help
        discrete = True
    elif not _folds_ok(y, fold_ids, v):
        for _ in range(FOLD_REDRAWS):
            fold_ids = make_folds(y, v, rng)
            if _folds_ok(y, fold_ids, v):
                break
        else:
            discrete = True

    Z = np.empty((n, len(specs)))
    failed = np.zeros(len(specs), dtype=bool)
    for fold in range(v):
        train = fold_ids != fold
        test = ~train
        if not test.any():
            continue
        tr_covs = {c: x[train] for c, x in covs.items()}
        te_covs = {c: x[test] for c, x in covs.items()}
        for k, spec in enumerate(specs):
            if failed[k]:
                continue
            try:
                fit = fit_learner(spec, tr_covs, y[train], w[train])
                Z[test, k] = predict(fit, te_covs, n=int(test.sum()))
            except (ValueError, np.linalg.LinAlgError):
                failed[k] = True
    if failed.all():
        raise SuperLearnerError("every candidate failed during cross-validation")
    Z[:, failed] = 0.5
    Z = clip_prob(Z)

    wn = w / w.sum()
    cv_risks = np.array([_risk(np.eye(len(specs))[k], Z, y, wn, loss) for k in range(len(specs))])
    cv_risks[failed] = np.inf
    active = np.flatnonzero(~failed)
    alpha = np.zeros(len(specs))
    if discrete or len(active) == 1:
        alpha[int(np.argmin(cv_risks))] = 1.0
        ens_risk = float(np.min(cv_risks))
        discrete = True
    else:
        sub, ens_risk = meta_weights(Z[:, active], y, w, loss, restarts, rng)
        alpha[active] = sub

    fits = tuple(
        fit_learner(spec, covs, y, w) if alpha[k] > 0 else None
        for k, spec in enumerate(specs)
    )
    return EnsembleFit(specs, fits, alpha, cv_risks, ens_risk, fold_ids, v, loss, discrete=discrete)


def sl_predict(fit: EnsembleFit, covs: Covariates, n: int | None = None) -> np.ndarray:
    """Convex combination of the refit candidates' predictions, clipped."""
    if n is None:
        if not covs:
            raise ValueError("pass n when predicting from an empty covariate mapping")
        n = len(next(iter(covs.values())))
    out = np.zeros(n)
    for a, cand in zip(fit.weights, fit.candidates):
        if a > 0:
            out += a * predict(cand, covs, n=n)
    return np.clip(out, P_MIN, 1.0 - P_MIN)
