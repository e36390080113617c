import json
import os
import subprocess
import sys

import pytest

from twostage_tmle.cli import fmt, main
from twostage_tmle.config import dump_config
from twostage_tmle.data_model import AnalysisConfig, write_frame
from twostage_tmle.simulator import DGPConfig, generate
from twostage_tmle.stage2 import SENSITIVITY_ROWS

T16 = 2.1199052992212466
ADJ = ("l0_hh_hiv", "l0_older", "l0_mobile")
FAST = dict(stage1_adjustment=ADJ, cv_folds=5, sl_restarts=0, seed=11)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    dgp = DGPConfig(individuals_per_partition=150, seed=11)
    write_frame(generate(dgp), root / "trial.csv")
    one = DGPConfig(n_clusters=6, partitions_per_cluster=1, individuals_per_partition=200, seed=12)
    write_frame(generate(one), root / "single.csv")
    configs = {
        "partition": AnalysisConfig(stage2_mode="pseudo_observational", **FAST),
        "cluster": AnalysisConfig(unit_level="cluster", stage2_mode="randomized", **FAST),
        "po_w": AnalysisConfig(stage2_mode="pseudo_observational", stage2_adjustment=("w_risk",), **FAST),
        "po_w_cluster": AnalysisConfig(unit_level="cluster", stage2_mode="pseudo_observational",
                                       stage2_adjustment=("w_risk",), **FAST),
    }
    for name, cfg in configs.items():
        (root / f"{name}.toml").write_text(dump_config(cfg))
    sim = AnalysisConfig(**FAST)
    tiny = DGPConfig(n_clusters=4, individuals_per_partition=60, seed=11)
    (root / "sim.toml").write_text(dump_config(sim, tiny, n_reps=2, mc_reps=100_000))
    return root


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


class TestAnalyze:
    def test_partition_report(self, workspace, tmp_path):
        code = run("analyze", "--data", workspace / "trial.csv", "--config", workspace / "partition.toml",
                   "--out", tmp_path)
        assert code == 0
        rep = read_json(tmp_path / "report.json")
        assert rep["units_label"] == "K=18"
        eff = rep["effect"]
        assert eff["df"] == 16 and eff["df_rule"] == "t_nminus2"
        assert eff["multiplier"] == pytest.approx(T16, abs=1e-10)
        assert eff["ci_lower"] < eff["point"] < eff["ci_upper"]
        assert len(rep["endpoints"]) == 18
        assert len(rep["input"]["sha256"]) == 64
        assert rep["config"]["stage1"]["adjustment"] == list(ADJ)

    def test_text_matches_json(self, workspace, tmp_path):
        run("analyze", "--data", workspace / "trial.csv", "--config", workspace / "partition.toml",
            "--out", tmp_path)
        rep = read_json(tmp_path / "report.json")
        text = (tmp_path / "report.txt").read_text()
        body = text.splitlines()[4:4 + 18]
        for line, ep in zip(body, rep["endpoints"]):
            cells = line.split()
            assert cells[0] == ep["unit_id"]
            assert float(cells[4]) == float(fmt(ep["psi_den_hat"]))
            assert float(cells[6]) == float(fmt(ep["endpoint"]))
        eff = rep["effect"]
        assert f"RR {fmt(eff['point'])} (95% CI {fmt(eff['ci_lower'])}-{fmt(eff['ci_upper'])})" in text

    def test_cluster_level(self, workspace, tmp_path):
        assert run("analyze", "--data", workspace / "trial.csv", "--config", workspace / "cluster.toml",
                   "--out", tmp_path) == 0
        rep = read_json(tmp_path / "report.json")
        assert rep["units_label"] == "N=9"
        sel = rep["diagnostics"]["selection"]
        assert sel["method"] == "adaptive_prespecification"
        assert "N=9" in (tmp_path / "report.txt").read_text()

    def test_invalid_row_exit_1(self, workspace, tmp_path, capsys):
        lines = (workspace / "trial.csv").read_text().splitlines()
        cells = lines[5].split(",")
        cells[4:6] = ["0", "1"]
        lines[5] = ",".join(cells)
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(lines) + "\n")
        code = run("analyze", "--data", bad, "--config", workspace / "partition.toml", "--out", tmp_path / "o")
        assert code == 1
        assert "row 6" in capsys.readouterr().err

    def test_estimation_failure_exit_2(self, workspace, tmp_path, capsys):
        tiny = DGPConfig(n_clusters=2, partitions_per_cluster=1, individuals_per_partition=100, seed=1)
        write_frame(generate(tiny), tmp_path / "two.csv")
        code = run("analyze", "--data", tmp_path / "two.csv", "--config", workspace / "cluster.toml",
                   "--out", tmp_path / "o")
        assert code == 2
        assert "at least 4" in capsys.readouterr().err

    def test_missing_config_exit_1(self, workspace, tmp_path):
        assert run("analyze", "--data", workspace / "trial.csv", "--config", tmp_path / "none.toml",
                   "--out", tmp_path) == 1

    def test_seed_flag_overrides(self, workspace, tmp_path):
        run("analyze", "--data", workspace / "trial.csv", "--config", workspace / "partition.toml",
            "--out", tmp_path, "--seed", "5")
        assert read_json(tmp_path / "report.json")["seed"] == 5

    def test_unit_levels_coincide_with_one_partition(self, workspace, tmp_path):
        run("analyze", "--data", workspace / "single.csv", "--config", workspace / "po_w.toml",
            "--out", tmp_path / "p")
        run("analyze", "--data", workspace / "single.csv", "--config", workspace / "po_w_cluster.toml",
            "--out", tmp_path / "c")
        p = read_json(tmp_path / "p" / "report.json")["effect"]
        c = read_json(tmp_path / "c" / "report.json")["effect"]
        for key in ("point", "se", "ci_lower", "ci_upper"):
            assert p[key] == pytest.approx(c[key], abs=1e-10)


class TestSensitivity:
    def test_rows_in_order(self, workspace, tmp_path):
        assert run("sensitivity", "--data", workspace / "trial.csv", "--config", workspace / "partition.toml",
                   "--out", tmp_path) == 0
        rep = read_json(tmp_path / "sensitivity.json")
        assert [r["estimator"] for r in rep["rows"]] == [r[0] for r in SENSITIVITY_ROWS]
        assert all(r["effect"] is not None for r in rep["rows"])
        assert rep["rows"][1]["effect"]["n_units"] == 9
        text = (tmp_path / "sensitivity.txt").read_text()
        header = text.splitlines()[0]
        assert header.split("  ")[0] == "Estimator"
        assert "Key assumptions" in header and "Point (95% CI)" in header
        for r in rep["rows"]:
            e = r["effect"]
            assert f"{fmt(e['point'])} ({fmt(e['ci_lower'])}-{fmt(e['ci_upper'])})" in text
        assert "*" not in text and "significant" not in text.lower()

    def test_endpoints_coincide_with_one_partition(self, workspace, tmp_path):
        run("sensitivity", "--data", workspace / "single.csv", "--config", workspace / "partition.toml",
            "--out", tmp_path)
        rows = read_json(tmp_path / "sensitivity.json")["rows"]
        part, clus = rows[0]["endpoints"], rows[1]["endpoints"]
        assert len(part) == len(clus) == 6
        for uid, v in clus.items():
            assert part[f"{uid}/p1"] == pytest.approx(v, abs=1e-10)

    def test_needs_adjustment_set(self, workspace, tmp_path):
        p = tmp_path / "u.toml"
        p.write_text(dump_config(AnalysisConfig()))
        assert run("sensitivity", "--data", workspace / "trial.csv", "--config", p, "--out", tmp_path) == 1


class TestSimulateAndGenerate:
    def test_simulate_smoke(self, workspace, tmp_path):
        assert run("simulate", "--config", workspace / "sim.toml", "--out", tmp_path) == 0
        lines = (tmp_path / "operating_characteristics.csv").read_text().splitlines()
        assert lines[0].startswith("config_id,bias,")
        row = dict(zip(lines[0].split(","), lines[1].split(",")))
        assert float(row["coverage"]) in (0.0, 0.5, 1.0)
        assert row["n_fail"] == "0"
        truth = read_json(tmp_path / "truth.json")
        assert "partition" in truth["truths"]

    def test_simulate_needs_dgp(self, workspace, tmp_path):
        assert run("simulate", "--config", workspace / "partition.toml", "--out", tmp_path, "--reps", "2") == 1

    def test_generate(self, workspace, tmp_path):
        out = tmp_path / "draw.csv"
        assert run("generate", "--config", workspace / "sim.toml", "--out", out) == 0
        again = tmp_path / "again.csv"
        run("generate", "--config", workspace / "sim.toml", "--out", again)
        assert out.read_bytes() == again.read_bytes()
        assert out.read_text().splitlines()[0].startswith("cluster_id,partition_id,individual_id,a,s,d0")

    def test_module_entry_point(self, workspace, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "twostage_tmle", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and "twostage-tmle" in proc.stdout


@pytest.mark.parametrize("threads", ["1", "8"])
def test_analyze_byte_identical(workspace, tmp_path, threads):
    outs = []
    for i, t in enumerate(("1", threads)):
        d = tmp_path / str(i)
        run("analyze", "--data", workspace / "trial.csv", "--config", workspace / "cluster.toml",
            "--out", d, "--threads", t)
        outs.append(((d / "report.json").read_bytes(), (d / "report.txt").read_bytes()))
    assert outs[0] == outs[1]
    assert os.path.getsize(tmp_path / "0" / "report.json") > 0
