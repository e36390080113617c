import numpy as np
import pytest
from scipy.special import expit

from twostage_tmle.targeting import (
    fluctuate_covariates,
    fluctuate_weighted,
    observe_scores,
    publish_influence,
    update,
)


class TestFluctuateWeighted:
    def test_solves_weighted_score(self, rng):
        n = 300
        y = (rng.random(n) < 0.3).astype(float)
        q = rng.uniform(0.1, 0.5, n)
        h = np.where(rng.random(n) < 0.7, rng.uniform(1, 4, n), 0.0)
        fl = fluctuate_weighted(y, q, h)
        used = h > 0
        assert abs(h[used] @ (y[used] - fl.targeted[used])) < 1e-8
        assert not fl.skipped

    def test_fixed_point(self, rng):
        q = rng.uniform(0.2, 0.8, 50)
        fl = fluctuate_weighted(q, q, np.ones(50))
        assert abs(fl.epsilon[0]) < 1e-10
        np.testing.assert_allclose(fl.targeted, q, atol=1e-10)

    def test_constant_outcome_skips(self):
        y = np.zeros(10)
        fl = fluctuate_weighted(y, np.full(10, 0.2), np.r_[np.ones(5), np.zeros(5)])
        assert fl.skipped
        np.testing.assert_array_equal(fl.epsilon, [0.0])
        np.testing.assert_array_equal(fl.targeted, 0.0)

    def test_needs_positive_weight(self):
        with pytest.raises(ValueError):
            fluctuate_weighted(np.ones(3), np.full(3, 0.5), np.zeros(3))


class TestFluctuateCovariates:
    def test_two_dimensional_score(self, rng):
        n = 40
        a = (np.arange(n) % 2).astype(float)
        y = rng.uniform(0.05, 0.3, n)
        q = np.full(n, 0.15)
        H = np.column_stack([a / 0.5, (1 - a) / 0.5])
        fl = fluctuate_covariates(y, q, H)
        np.testing.assert_allclose(fl.score, 0, atol=1e-9)
        # per-arm means are reproduced exactly by the saturated fluctuation
        assert fl.targeted[a == 1][0] == pytest.approx(y[a == 1].mean(), abs=1e-10)

    def test_update_matches_targeted(self, rng):
        n = 30
        y = rng.uniform(0, 1, n)
        q = rng.uniform(0.2, 0.8, n)
        H = rng.uniform(0.5, 2, (n, 2))
        fl = fluctuate_covariates(y, q, H)
        np.testing.assert_allclose(update(q, H, fl.epsilon), fl.targeted, atol=1e-14)


def test_observer_collects_records(rng):
    with observe_scores() as seen:
        fluctuate_weighted(np.r_[1.0, 0.0], np.r_[0.5, 0.5], np.ones(2))
        publish_influence("x", np.r_[1.0, -1.0])
    assert len(seen) == 2
    assert seen[1].mean == 0.0
    assert expit(0) == 0.5
