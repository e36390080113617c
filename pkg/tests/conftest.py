import numpy as np
import pytest

from twostage_tmle.targeting import Fluctuation, InfluenceRecord, observe_scores

SCORE_TOL = 1e-6
IC_MEAN_TOL = 1e-8


@pytest.fixture(autouse=True)
def estimating_equations_hold():
    """Every fluctuation in every test must solve its score equation, and every
    Stage 2 influence curve must average to zero."""
    with observe_scores() as records:
        yield records
    for rec in records:
        if isinstance(rec, Fluctuation) and not rec.skipped:
            worst = float(np.max(np.abs(rec.score))) if rec.score.size else 0.0
            assert worst < SCORE_TOL, f"fluctuation {rec.label!r} left score {worst:.3g}"
        elif isinstance(rec, InfluenceRecord):
            assert abs(rec.mean) < IC_MEAN_TOL, f"{rec.label}: mean IC {rec.mean:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
