"""Logistic fluctuation (the TMLE targeting step) shared by both stages.

Each fluctuation records the empirical score ``sum H (Y - Q*)`` it solved,
and Stage 2 records the mean of its influence-curve values.
:func:`observe_scores` collects those records, which is how the test suite
checks the estimating equations across every estimate it produces.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import expit, logit

from .learners import clip_prob, fit_logistic

_observers: list[list] = []


@dataclass(frozen=True, eq=False)
class Fluctuation:
    """Outcome of one targeting step.

    ``targeted`` holds Q* for every row passed in; ``score`` is the empirical
    score per clever-covariate dimension; ``skipped`` marks the degenerate
    path where the fit was not run.
    """

    label: str
    epsilon: np.ndarray
    targeted: np.ndarray
    score: np.ndarray
    skipped: bool
    converged: bool


@dataclass(frozen=True)
class InfluenceRecord:
    label: str
    mean: float
    n: int


def publish_influence(label: str, ic: np.ndarray) -> None:
    rec = InfluenceRecord(label, float(np.mean(ic)), len(ic))
    for sink in _observers:
        sink.append(rec)


def _publish(fl: Fluctuation) -> Fluctuation:
    for sink in _observers:
        sink.append(fl)
    return fl


@contextlib.contextmanager
def observe_scores() -> Iterator[list]:
    """Collect every :class:`Fluctuation` and :class:`InfluenceRecord` produced inside the block."""
    sink: list = []
    _observers.append(sink)
    try:
        yield sink
    finally:
        _observers.remove(sink)


def fluctuate_weighted(y: np.ndarray, q: np.ndarray, h: np.ndarray, label: str = "") -> Fluctuation:
    """Intercept-only logistic fluctuation with offset ``logit(q)`` and weights ``h``.

    Rows with ``h == 0`` do not enter the fit but still receive targeted
    predictions.  When the outcome is constant over the fitted rows the
    fluctuation diverges, so epsilon is set to 0 and every row gets that
    constant (the initial fit already interpolates those data).
    """
    y = np.asarray(y, dtype=float)
    q = clip_prob(np.asarray(q, dtype=float))
    h = np.asarray(h, dtype=float)
    used = h > 0
    if not used.any():
        raise ValueError("no rows with positive clever covariate")
    yu = y[used]
    if np.ptp(yu) == 0:
        const = np.full(len(q), yu[0])
        score = np.array([float(h[used] @ (yu - const[used]))])
        return _publish(Fluctuation(label, np.zeros(1), const, score, True, True))
    off = logit(q)
    fit = fit_logistic(np.empty((int(used.sum()), 0)), yu, weights=h[used], offset=off[used])
    eps = float(fit.coefficients[0])
    qs = expit(off + eps)
    score = np.array([float(h[used] @ (yu - qs[used]))])
    return _publish(Fluctuation(label, np.array([eps]), qs, score, False, fit.converged))


def fluctuate_covariates(y: np.ndarray, q: np.ndarray, H: np.ndarray, label: str = "") -> Fluctuation:
    """Logistic fluctuation ``logit Q* = logit Q + H @ eps`` with clever covariates ``H`` (n x d)."""
    y = np.asarray(y, dtype=float)
    q = clip_prob(np.asarray(q, dtype=float))
    H = np.asarray(H, dtype=float).reshape(len(y), -1)
    off = logit(q)
    fit = fit_logistic(H, y, offset=off, intercept=False)
    eps = fit.coefficients
    qs = expit(off + H @ eps)
    score = H.T @ (y - qs)
    return _publish(Fluctuation(label, eps, qs, score, False, fit.converged))


def update(q: np.ndarray, H: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Apply fitted fluctuation parameters to new initial predictions."""
    H = np.asarray(H, dtype=float).reshape(len(q), -1)
    return expit(logit(clip_prob(np.asarray(q, dtype=float))) + H @ eps)
