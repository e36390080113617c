"""TOML configuration files for analyses and simulations.

Layout::

    seed = 20240101

    [data]
    unit_level = "partition"            # or "cluster"
    schema_mapping = { arm = "a" }      # optional file-column renames

    [stage1]
    adjustment = ["l0_hh_hiv", "l0_older"]   # or "unadjusted"
    adjustment_l1 = []
    learners = ["intercept_only_mean", "main_terms_logistic", "saturated_logistic"]
    g_bound = 0.025
    cv_folds = 10
    sl_restarts = 10

    [stage2]
    mode = "pseudo_observational"       # randomized | unadjusted
    adjustment = ["w_risk"]             # omit for every unit covariate
    known_g = 0.5                       # optional, randomized mode only
    effect_scale = "risk_ratio"

    [simulation]
    n_reps = 500
    mc_reps = 1000000
    [simulation.dgp]                    # any DGPConfig field
    n_clusters = 9

A simulation config may also list several analyses under
``[[simulation.analyses]]``; each entry takes an ``id`` plus ``unit_level``
and the ``stage1`` / ``stage2`` keys above, overriding the top-level values.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Mapping

import tomli
import tomli_w

from .data_model import AnalysisConfig
from .simulator import DGPConfig, StudyConfig


class ConfigError(ValueError):
    pass


_STAGE1_KEYS = {"adjustment": "stage1_adjustment", "adjustment_l1": "stage1_adjustment_l1",
                "learners": "stage1_learners", "g_bound": "g_bound", "cv_folds": "cv_folds",
                "sl_restarts": "sl_restarts"}
_STAGE2_KEYS = {"mode": "stage2_mode", "adjustment": "stage2_adjustment", "known_g": "stage2_known_g",
                "effect_scale": "effect_scale"}
_TOP_KEYS = {"seed", "data", "stage1", "stage2", "simulation"}


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Everything a CLI run needs besides the data file."""

    analysis: AnalysisConfig
    schema_mapping: Mapping[str, str] = field(default_factory=dict)
    dgp: DGPConfig | None = None
    studies: tuple[StudyConfig, ...] = ()
    n_reps: int | None = None
    mc_reps: int = 1_000_000
    raw: Mapping[str, Any] = field(default_factory=dict)

    def with_seed(self, seed: int) -> "RunConfig":
        studies = tuple(StudyConfig(s.config_id, s.config.replace(seed=seed)) for s in self.studies)
        dgp = self.dgp.replace(seed=seed) if self.dgp is not None else None
        return RunConfig(self.analysis.replace(seed=seed), self.schema_mapping, dgp, studies,
                         self.n_reps, self.mc_reps, self.raw)


def _check_keys(section: str, got: Mapping, allowed) -> None:
    unknown = set(got) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def _analysis_kwargs(unit_level, stage1: Mapping, stage2: Mapping) -> dict:
    _check_keys("stage1", stage1, _STAGE1_KEYS)
    _check_keys("stage2", stage2, _STAGE2_KEYS)
    kw: dict = {}
    if unit_level is not None:
        kw["unit_level"] = unit_level
    kw.update({_STAGE1_KEYS[k]: v for k, v in stage1.items()})
    kw.update({_STAGE2_KEYS[k]: v for k, v in stage2.items()})
    return kw


def parse_config(doc: Mapping[str, Any]) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed TOML document."""
    _check_keys("top level", doc, _TOP_KEYS)
    data = dict(doc.get("data", {}))
    _check_keys("data", data, {"unit_level", "schema_mapping"})
    stage1, stage2 = dict(doc.get("stage1", {})), dict(doc.get("stage2", {}))
    seed = int(doc.get("seed", 0))
    try:
        base_kw = _analysis_kwargs(data.get("unit_level"), stage1, stage2)
        analysis = AnalysisConfig(seed=seed, **base_kw)
        sim = dict(doc.get("simulation", {}))
        _check_keys("simulation", sim, {"dgp", "analyses", "n_reps", "mc_reps"})
        dgp = DGPConfig.from_dict(dict(sim["dgp"], seed=seed)) if "dgp" in sim else None
        studies = []
        for i, entry in enumerate(sim.get("analyses", [])):
            entry = dict(entry)
            cid = str(entry.pop("id", f"config_{i}"))
            _check_keys(f"simulation.analyses {cid}", entry, {"unit_level", "stage1", "stage2"})
            kw = dict(base_kw)
            kw.update(_analysis_kwargs(entry.get("unit_level"), entry.get("stage1", {}), entry.get("stage2", {})))
            studies.append(StudyConfig(cid, AnalysisConfig(seed=seed, **kw)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        analysis=analysis,
        schema_mapping=dict(data.get("schema_mapping", {})),
        dgp=dgp,
        studies=tuple(studies),
        n_reps=int(sim["n_reps"]) if "n_reps" in sim else None,
        mc_reps=int(sim.get("mc_reps", 1_000_000)),
        raw=doc,
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)


def analysis_to_dict(cfg: AnalysisConfig) -> dict:
    """Config echo in the file layout (also used in reports)."""
    stage1: dict = {
        "adjustment": cfg.stage1_adjustment if isinstance(cfg.stage1_adjustment, str) else list(cfg.stage1_adjustment),
        "adjustment_l1": list(cfg.stage1_adjustment_l1),
        "learners": list(cfg.stage1_learners),
        "g_bound": cfg.g_bound,
        "cv_folds": cfg.cv_folds,
        "sl_restarts": cfg.sl_restarts,
    }
    stage2: dict = {"mode": cfg.stage2_mode, "effect_scale": cfg.effect_scale}
    if cfg.stage2_adjustment is not None:
        stage2["adjustment"] = list(cfg.stage2_adjustment)
    if cfg.stage2_known_g is not None:
        stage2["known_g"] = cfg.stage2_known_g
    return {"seed": cfg.seed, "data": {"unit_level": cfg.unit_level}, "stage1": stage1, "stage2": stage2}


def dump_config(cfg: AnalysisConfig, dgp: DGPConfig | None = None, **simulation) -> str:
    doc = analysis_to_dict(cfg)
    if dgp is not None or simulation:
        sim = dict(simulation)
        if dgp is not None:
            d = dgp.as_dict()
            d.pop("seed")
            sim["dgp"] = d
        doc["simulation"] = sim
    return tomli_w.dumps(doc)
