"""End-to-end acceptance checks.

Each test records one PASS/FAIL line in ``RESULTS``; ``conftest.py`` prints
them in the terminal summary.  Criteria 5-7 share one replication study of
the calibrated SEARCH-like design.
"""
import json
import time

import numpy as np
import pytest

from twostage_tmle.cli import main
from twostage_tmle.config import dump_config
from twostage_tmle.data_model import AnalysisConfig, write_frame
from twostage_tmle.simulator import (
    DGPConfig,
    StudyConfig,
    counterfactual_truth,
    generate,
    replicate_study,
    search_like_dgp,
    statistical_estimand,
)
from twostage_tmle.stage1 import estimate_endpoint
from twostage_tmle.stage2 import tmle_effect
from twostage_tmle.targeting import Fluctuation, InfluenceRecord, observe_scores

from helpers import random_unit, rows_from, unit_records
from oracles import EmptyStratum, arm_mean_contrast, stratified_endpoint, stratum_probabilities

RESULTS: dict[int, str] = {}

ADJ = ("l0_hh_hiv", "l0_older", "l0_mobile")
STUDY_REPS = 1000
STUDY_MC = 1_000_000


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"


def test_criterion_1_complete_data_reduction():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_unit = 0.0
    for i in range(6):
        u = random_unit(rng, n=200, complete=True, n_l0=2, unit_id=f"u{i}")
        for adj in (("l0_x0",), ("l0_x0", "l0_x1")):
            est = estimate_endpoint(u, AnalysisConfig(stage1_adjustment=adj, stage1_adjustment_l1=("l1_z",),
                                                      sl_restarts=0, cv_folds=5))
            worst_unit = max(worst_unit, abs(est.endpoint - u.y1[u.y0 == 0].mean()))
    endpoints = rng.uniform(0.02, 0.4, 18)
    arms = np.r_[np.ones(9), np.zeros(9)].astype(int)
    rr_oracle, rd_oracle = arm_mean_contrast(endpoints, arms)
    rows = rows_from(endpoints, arms)
    rr = tmle_effect(rows, AnalysisConfig()).point
    rd = tmle_effect(rows, AnalysisConfig(effect_scale="risk_difference")).point
    worst_effect = max(abs(rr - rr_oracle), abs(rd - rd_oracle))
    elapsed = time.perf_counter() - start
    ok = worst_unit < 1e-10 and worst_effect < 1e-10 and elapsed < 1.0
    record(1, ok, f"max unit error {worst_unit:.1e}, effect error {worst_effect:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_2_stratification_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    cfg = AnalysisConfig(stage1_learners=("saturated_logistic",), g_bound=0.01, seed=4)
    worst, checked = 0.0, 0
    while checked < 24:
        n_l0 = 1 + checked % 2
        with_l1 = checked % 4 >= 2
        u = random_unit(rng, n=int(rng.integers(150, 350)), n_l0=n_l0, with_l1=with_l1)
        l0 = [f"l0_x{j}" for j in range(n_l0)]
        l1 = ["l1_z"] if with_l1 else []
        recs = unit_records(u)
        try:
            oracle = stratified_endpoint(recs, l0, l1)
            if min(stratum_probabilities(recs, l0, l1).values()) <= cfg.g_bound:
                continue
        except EmptyStratum:
            continue
        est = estimate_endpoint(u, cfg.replace(stage1_adjustment=tuple(l0), stage1_adjustment_l1=tuple(l1)))
        worst = max(worst, abs(est.psi_den_hat - oracle["psi_den"]), abs(est.psi_num_hat - oracle["psi_num"]))
        checked += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 10.0
    record(2, ok, f"{checked} units, max |TMLE - oracle| {worst:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_3_score_equations(tmp_path):
    # the autouse fixture enforces this for every test; here the full pipeline is exercised explicitly
    dgp = DGPConfig(individuals_per_partition=200, seed=3)
    write_frame(generate(dgp), tmp_path / "d.csv")
    with observe_scores() as seen:
        for level, mode in (("partition", "pseudo_observational"), ("cluster", "randomized"),
                            ("partition", "unadjusted")):
            for scale in ("risk_ratio", "risk_difference"):
                cfg = AnalysisConfig(unit_level=level, stage1_adjustment=ADJ, stage2_mode=mode,
                                     effect_scale=scale, sl_restarts=0, cv_folds=5, seed=3)
                (tmp_path / "c.toml").write_text(dump_config(cfg))
                assert main(["analyze", "--data", str(tmp_path / "d.csv"), "--config", str(tmp_path / "c.toml"),
                             "--out", str(tmp_path / "o")]) == 0
    flucts = [r for r in seen if isinstance(r, Fluctuation) and not r.skipped]
    ics = [r for r in seen if isinstance(r, InfluenceRecord)]
    worst_score = max(float(np.max(np.abs(f.score))) for f in flucts)
    worst_ic = max(abs(r.mean) for r in ics)
    ok = worst_score < 1e-6 and worst_ic < 1e-8 and len(ics) == 6
    record(3, ok, f"{len(flucts)} fluctuations, max |score| {worst_score:.1e}; "
                  f"{len(ics)} Stage 2 fits, max |mean IC| {worst_ic:.1e} (also enforced suite-wide)")
    assert ok


def test_criterion_4_identification():
    start = time.perf_counter()
    dgp = DGPConfig(seed=44)
    worst = 0.0
    for a, w in ((0, -0.8), (1, 0.0), (0, 0.9), (1, 1.5)):
        est = statistical_estimand(dgp, w, a)
        truth = counterfactual_truth(dgp, w, a, n_individuals=1_000_000)
        for key in ("psi_den", "psi_num", "endpoint"):
            worst = max(worst, abs(est[key] - truth[key]) / truth[f"{key}_se"])
    elapsed = time.perf_counter() - start
    ok = worst < 3.0 and elapsed < 120.0
    record(4, ok, f"max |estimand - MC truth| = {worst:.2f} MC SE at 1e6 individuals, {elapsed:.1f} s")
    assert ok


@pytest.fixture(scope="session")
def search_study():
    # no meta-learner restarts and V=5 keep 1000 replicates inside the runtime budget on one core
    fast = dict(sl_restarts=0, cv_folds=5, seed=20240101)
    studies = [
        StudyConfig("adjusted_partition", AnalysisConfig(stage1_adjustment=ADJ,
                                                         stage2_mode="pseudo_observational", **fast)),
        StudyConfig("adjusted_cluster", AnalysisConfig(unit_level="cluster", stage1_adjustment=ADJ,
                                                       stage2_mode="randomized", **fast)),
        StudyConfig("unadjusted_partition", AnalysisConfig(stage2_mode="unadjusted", **fast)),
    ]
    res = replicate_study(search_like_dgp(seed=20240101), studies, STUDY_REPS, mc_reps=STUDY_MC)
    print("\n" + res.table.to_string())
    return res


def _row(res, cid):
    return res.table.set_index("config_id").loc[cid]


def test_criterion_5_bias_separation(search_study):
    res = search_study
    adj, raw = _row(res, "adjusted_partition"), _row(res, "unadjusted_partition")
    truth = res.truths["partition"].true_rr
    adj_ok = abs(adj["bias"]) < 3 * adj["mc_se_bias"]
    raw_ok = raw["bias"] > 3 * raw["mc_se_bias"]
    flip = adj["mean_point"] < 1.0 <= raw["mean_point"]
    fast = res.seconds < 30 * 60
    ok = adj_ok and raw_ok and flip and fast and abs(truth - 0.75) < 0.01
    record(5, ok, f"true RR {truth:.3f}; adjusted bias {adj['bias']:+.4f} (MC SE {adj['mc_se_bias']:.4f}); "
                  f"unadjusted bias {raw['bias']:+.4f} (MC SE {raw['mc_se_bias']:.4f}); mean RR "
                  f"{adj['mean_point']:.3f} vs {raw['mean_point']:.3f}; {int(adj['n_reps'])} reps in "
                  f"{res.seconds / 60:.1f} min")
    assert ok


def test_criterion_6_coverage(search_study):
    adj = _row(search_study, "adjusted_partition")
    ok = 0.90 <= adj["coverage"] <= 0.98 and adj["n_reps"] >= 1000 and adj["n_fail"] == 0
    record(6, ok, f"adjusted partition coverage {adj['coverage']:.3f} over {int(adj['n_reps'])} reps")
    assert ok


def test_criterion_7_precision_ordering(search_study):
    part, clus = _row(search_study, "adjusted_partition"), _row(search_study, "adjusted_cluster")
    ok = part["mean_ci_width"] < clus["mean_ci_width"]
    record(7, ok, f"mean log-RR CI width K=18 {part['mean_ci_width']:.4f} vs N=9 {clus['mean_ci_width']:.4f}")
    assert ok


def test_criterion_8_determinism(tmp_path):
    analysis = AnalysisConfig(unit_level="cluster", stage1_adjustment=ADJ, stage2_mode="randomized",
                              sl_restarts=2, cv_folds=5, seed=8)
    tiny = DGPConfig(n_clusters=6, individuals_per_partition=120, seed=8)
    (tmp_path / "sim.toml").write_text(dump_config(analysis, tiny, n_reps=4, mc_reps=100_000))
    write_frame(generate(DGPConfig(individuals_per_partition=200, seed=8)), tmp_path / "d.csv")
    outputs = []
    for run, threads in enumerate(("1", "1", "8")):
        sim_out, ana_out = tmp_path / f"s{run}", tmp_path / f"a{run}"
        assert main(["simulate", "--config", str(tmp_path / "sim.toml"), "--out", str(sim_out),
                     "--threads", threads]) == 0
        assert main(["analyze", "--data", str(tmp_path / "d.csv"), "--config", str(tmp_path / "sim.toml"),
                     "--out", str(ana_out), "--threads", threads]) == 0
        files = sorted(p for p in list(sim_out.iterdir()) + list(ana_out.iterdir()))
        outputs.append({p.name: p.read_bytes() for p in files})
    ok = outputs[0] == outputs[1] == outputs[2] and len(outputs[0]) == 6
    record(8, ok, f"{len(outputs[0])} output files byte-identical over 2 runs and threads 1 vs 8")
    json.loads(outputs[0]["report.json"])
    assert ok
