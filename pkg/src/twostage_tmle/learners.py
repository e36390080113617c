"""Weighted, offset-capable regression learners.

Everything that fits a probability in this package goes through
:func:`fit_logistic`, a quasi-binomial IRLS solver that accepts fractional
responses in [0, 1].  :func:`fit_learner` builds the design for a
:class:`LearnerSpec` and dispatches to the right solver.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.special import expit, logit, xlogy

P_MIN = 1e-6
MAX_ITER = 100
DEVIANCE_TOL = 1e-10
FALLBACK_RIDGE = 1e-6
LINEAR_RIDGE = 1e-8
MAX_SATURATED = 4

LEARNER_KINDS = ("intercept_only_mean", "main_terms_logistic", "main_terms_linear", "saturated_logistic")

Covariates = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.kind == "saturated_logistic" and len(self.covariates) > MAX_SATURATED:
            raise ValueError(f"saturated_logistic supports at most {MAX_SATURATED} covariates")

    @property
    def label(self) -> str:
        if self.kind == "intercept_only_mean" or not self.covariates:
            return self.kind
        return f"{self.kind}({', '.join(self.covariates)})"


@dataclass(frozen=True, eq=False)
class FittedLearner:
    """A fitted prediction function.

    ``columns`` are the covariates that entered the design (constant columns
    are dropped at fit time); for ``saturated_logistic`` the coefficients are
    the per-cell logits, cell index ``sum_j 2**j * x_j``.
    """

    spec: LearnerSpec | None
    coefficients: np.ndarray
    converged: bool
    n_iterations: int
    columns: tuple[str, ...] = ()
    intercept: bool = True
    link: str = "logit"


def clip_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, P_MIN, 1.0 - P_MIN)


def _weights(w, n: int) -> np.ndarray:
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ValueError("weights must have one entry per row")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative with at least one positive entry")
    return w


def _objective(y, mu, w, beta, ridge):
    # half the quasi-binomial deviance plus ridge penalty
    dev = xlogy(y, y) - xlogy(y, mu) + xlogy(1.0 - y, 1.0 - y) - xlogy(1.0 - y, 1.0 - mu)
    return float(w @ dev) + 0.5 * ridge * float(beta @ beta)


def _irls(X, y, w, offset, ridge, beta0):
    n, p = X.shape
    beta = beta0.copy()
    mu = expit(offset + X @ beta)
    obj = _objective(y, mu, w, beta, ridge)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        wv = w * mu * (1.0 - mu)
        grad = X.T @ (w * (y - mu)) - ridge * beta
        hess = (X.T * wv) @ X
        diag = hess.flat[:: p + 1]
        # Levenberg damping on the Hessian only; the fixed point is unchanged
        hess.flat[:: p + 1] = diag + ridge + 1e-12 * max(1.0, float(diag.max(initial=0.0)))
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            mu_c = expit(offset + X @ cand)
            obj_c = _objective(y, mu_c, w, cand, ridge)
            if np.isfinite(obj_c) and obj_c <= obj + 1e-12 * max(1.0, abs(obj)):
                break
            t *= 0.5
        else:
            cand, mu_c, obj_c = beta, mu, obj
        change = abs(obj - obj_c)
        beta, mu, obj = cand, mu_c, obj_c
        if change < DEVIANCE_TOL:
            converged = True
            break
    return beta, converged, it


def _separated(X, beta, w, y, offset) -> bool:
    lin = X @ beta
    if np.any(np.abs(lin[w > 0]) > 30.0):
        return True
    # complete separation: IRLS stalls with every fitted value at its 0/1 response
    fitted = expit(offset[w > 0] + lin[w > 0])
    return bool(np.all((y[w > 0] == 0) | (y[w > 0] == 1)) and np.max(np.abs(y[w > 0] - fitted)) < 1e-8)


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    offset: np.ndarray | None = None,
    intercept: bool = True,
) -> FittedLearner:
    """Weighted quasi-binomial logistic regression by IRLS.

    Parameters
    ----------
    X : ndarray, shape (n, p)
        Design without the intercept column (``p`` may be 0).
    y : ndarray
        Responses in [0, 1]; fractional values are allowed.
    weights : ndarray, optional
        Non-negative case weights.
    offset : ndarray, optional
        Fixed offset on the logit scale.
    intercept : bool
        Prepend an intercept column.

    Returns
    -------
    FittedLearner
        ``converged`` is False when IRLS failed to settle or the data are
        separated; the coefficients then come from a ridge-penalised refit.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    X = np.asarray(X, dtype=float).reshape(n, -1)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("responses must lie in [0, 1]")
    w = _weights(weights, n)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != (n,):
        raise ValueError("offset must have one entry per row")
    D = np.column_stack([np.ones(n), X]) if intercept else X
    beta0 = np.zeros(D.shape[1])
    if intercept and offset is None:
        ybar = float(w @ y) / float(w.sum())
        beta0[0] = logit(np.clip(ybar, P_MIN, 1 - P_MIN))
    beta, ok, it = _irls(D, y, w, off, 0.0, beta0)
    if not ok or _separated(D, beta, w, y, off):
        beta, _, it2 = _irls(D, y, w, off, FALLBACK_RIDGE, np.zeros(D.shape[1]))
        return FittedLearner(None, beta, False, it + it2, intercept=intercept)
    return FittedLearner(None, beta, True, it, intercept=intercept)


def fit_linear(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> FittedLearner:
    """Weighted least squares with a 1e-8 ridge so the normal equations always solve."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    X = np.asarray(X, dtype=float).reshape(n, -1)
    w = _weights(weights, n)
    D = np.column_stack([np.ones(n), X])
    lhs = (D.T * w) @ D + LINEAR_RIDGE * np.eye(D.shape[1])
    beta = np.linalg.solve(lhs, D.T @ (w * y))
    return FittedLearner(None, beta, True, 1, link="identity")


def _design(covs: Covariates, names: Sequence[str], n: int) -> np.ndarray:
    if not names:
        return np.empty((n, 0))
    return np.column_stack([np.asarray(covs[c], dtype=float) for c in names])


def _cells(covs: Covariates, names: Sequence[str], n: int) -> np.ndarray:
    idx = np.zeros(n, dtype=np.int64)
    for j, c in enumerate(names):
        x = np.asarray(covs[c])
        if np.any((x != 0) & (x != 1)):
            raise ValueError(f"saturated_logistic requires binary covariates; {c!r} is not")
        idx += (x.astype(np.int64)) << j
    return idx


def _nonconstant(covs: Covariates, names: Sequence[str], w: np.ndarray) -> tuple[str, ...]:
    keep = []
    pos = w > 0
    for c in names:
        x = np.asarray(covs[c], dtype=float)[pos]
        if x.size and np.ptp(x) > 0:
            keep.append(c)
    return tuple(keep)


def fit_learner(
    spec: LearnerSpec,
    covs: Covariates,
    y: np.ndarray,
    weights: np.ndarray | None = None,
) -> FittedLearner:
    """Fit the learner described by ``spec`` on the named covariate columns."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    w = _weights(weights, n)
    missing = [c for c in spec.covariates if c not in covs]
    if missing:
        raise KeyError(f"covariate(s) {missing} not available")

    if spec.kind == "intercept_only_mean":
        ybar = float(w @ y) / float(w.sum())
        coef = np.array([logit(np.clip(ybar, P_MIN, 1 - P_MIN))])
        return FittedLearner(spec, coef, True, 0)

    if spec.kind == "saturated_logistic":
        # closed form: the saturated quasi-binomial MLE is the weighted cell mean
        cells = _cells(covs, spec.covariates, n)
        k = 1 << len(spec.covariates)
        wsum = np.bincount(cells, weights=w, minlength=k)
        ysum = np.bincount(cells, weights=w * y, minlength=k)
        pooled = float(w @ y) / float(w.sum())
        means = np.where(wsum > 0, ysum / np.where(wsum > 0, wsum, 1.0), pooled)
        return FittedLearner(spec, logit(clip_prob(means)), True, 0, columns=spec.covariates)

    cols = _nonconstant(covs, spec.covariates, w)
    X = _design(covs, cols, n)
    if spec.kind == "main_terms_linear":
        fit = fit_linear(X, y, w)
    else:
        fit = fit_logistic(X, y, w)
    return FittedLearner(spec, fit.coefficients, fit.converged, fit.n_iterations,
                         columns=cols, intercept=True, link=fit.link)


def _rows(X: Covariates, n: int | None) -> int:
    if n is not None:
        return n
    if not X:
        raise ValueError("pass n when predicting from an empty covariate mapping")
    return len(next(iter(X.values())))


def linear_predictor(fit: FittedLearner, X: Union[np.ndarray, Covariates], n: int | None = None) -> np.ndarray:
    if isinstance(X, Mapping):
        spec = fit.spec
        rows = _rows(X, n)
        if spec is not None and spec.kind == "intercept_only_mean":
            return np.full(rows, fit.coefficients[0])
        names = spec.covariates if spec is not None and spec.kind == "saturated_logistic" else fit.columns
        missing = [c for c in names if c not in X]
        if missing:
            raise KeyError(f"covariate(s) {missing} not available")
        if spec is not None and spec.kind == "saturated_logistic":
            return fit.coefficients[_cells(X, names, rows)]
        D = _design(X, names, rows)
    else:
        D = np.asarray(X, dtype=float)
        if D.ndim == 1:
            D = D.reshape(-1, 1)
    expected = len(fit.coefficients) - int(fit.intercept)
    if D.shape[1] != expected:
        raise ValueError(f"design has {D.shape[1]} columns, fit expects {expected}")
    if fit.intercept:
        return fit.coefficients[0] + D @ fit.coefficients[1:]
    return D @ fit.coefficients


def predict(fit: FittedLearner, X: Union[np.ndarray, Covariates], n: int | None = None) -> np.ndarray:
    """Predicted probabilities clipped to ``[P_MIN, 1 - P_MIN]``.

    ``X`` is a design array for fits from :func:`fit_logistic` /
    :func:`fit_linear`, or a name-to-column mapping for :func:`fit_learner`
    fits.  Pass ``n`` when the mapping is empty (intercept-only learners).
    """
    eta = linear_predictor(fit, X, n)
    if fit.link == "identity":
        return clip_prob(eta)
    return clip_prob(expit(eta))
