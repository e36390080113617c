import pytest
import tomli

from twostage_tmle.config import ConfigError, dump_config, load_config, parse_config
from twostage_tmle.data_model import AnalysisConfig
from twostage_tmle.simulator import DGPConfig

EXAMPLE = """
seed = 17

[data]
unit_level = "cluster"
schema_mapping = { arm = "a" }

[stage1]
adjustment = ["l0_hh_hiv"]
g_bound = 0.05

[stage2]
mode = "randomized"
known_g = 0.5

[simulation]
n_reps = 20
mc_reps = 200000

[simulation.dgp]
n_clusters = 4
individuals_per_partition = [100, 150]
sampling = { const = 0.0, hh_hiv = 1.0 }

[[simulation.analyses]]
id = "raw"
unit_level = "partition"
stage1 = { adjustment = "unadjusted" }
stage2 = { mode = "unadjusted" }
"""


class TestParse:
    def test_example(self):
        cfg = parse_config(tomli.loads(EXAMPLE))
        a = cfg.analysis
        assert (a.seed, a.unit_level, a.stage1_adjustment, a.g_bound) == (17, "cluster", ("l0_hh_hiv",), 0.05)
        assert a.stage2_known_g == 0.5
        assert cfg.schema_mapping == {"arm": "a"}
        assert cfg.dgp.n_clusters == 4 and cfg.dgp.individuals_per_partition == (100, 150)
        assert cfg.dgp.seed == 17
        assert (cfg.n_reps, cfg.mc_reps) == (20, 200_000)
        (study,) = cfg.studies
        assert study.config_id == "raw"
        assert study.config.unit_level == "partition" and not study.config.stage1_adjusted
        # the entry inherits the remaining top-level settings
        assert study.config.g_bound == 0.05

    def test_with_seed(self):
        cfg = parse_config(tomli.loads(EXAMPLE)).with_seed(99)
        assert cfg.analysis.seed == 99 and cfg.dgp.seed == 99
        assert all(s.config.seed == 99 for s in cfg.studies)

    @pytest.mark.parametrize("doc", [
        {"stage1": {"adjustmnet": []}},
        {"stage2": {"mode": "magic"}},
        {"extra": {}},
        {"data": {"unit_level": "village"}},
        {"simulation": {"dgp": {"n_clusters": 1}}},
        {"simulation": {"dgp": {"clusters": 3}}},
    ])
    def test_invalid(self, doc):
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("seed = = 3\n")
        with pytest.raises(ConfigError):
            load_config(p)


def test_dump_round_trip(tmp_path):
    a = AnalysisConfig(stage1_adjustment=("l0_hh_hiv", "l0_older"), stage2_mode="pseudo_observational",
                       stage2_adjustment=("w_risk",), seed=5, sl_restarts=3)
    dgp = DGPConfig(n_clusters=6, effect_size=0.0, seed=5)
    p = tmp_path / "c.toml"
    p.write_text(dump_config(a, dgp, n_reps=7))
    cfg = load_config(p)
    assert cfg.analysis == a
    assert cfg.dgp == dgp
    assert cfg.n_reps == 7
