"""Hierarchical data-generating processes, Monte Carlo truth and replication studies.

Every structural equation is logistic-linear in its parents.  Coefficients
are given as ``{term: value}`` mappings where a term is ``"const"``, a
variable name, or a ``":"``-joined product such as ``"a:hh_hiv"``.  The
variables visible to the individual-level equations are the partition
covariate ``w``, the baseline covariates named in ``l0_names``, the arm
``a``, the post-baseline covariate ``l1`` and, for deliberately MNAR
designs, the latent outcomes ``y0`` / ``y1``.

Random streams are keyed by ``(seed, replicate, cluster, partition)`` so a
partition's draws do not depend on how many other units exist.  All
uniforms of a partition are drawn up front, which gives common random
numbers when the same partition is replayed under the other arm.
"""
from __future__ import annotations

import dataclasses
import itertools
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .data_model import AnalysisConfig, group_units, validate_frame
from .parallel import pool_map
from .stage1 import Stage1Error, estimate_endpoints
from .stage2 import Stage2Error, rows_from_estimates, tmle_effect

INTERFERENCE_MODES = ("none", "cross_partition")

# namespaces for SeedSequence spawn keys
_ARM_KEY, _CLUSTER_KEY, _PARTITION_KEY = 0, 1, 2
_TRUTH_REPLICATE = 2**31 - 1
_WORLD_REPLICATE = 2**31 - 2

_EQUATIONS = ("sampling", "baseline_outcome", "baseline_measurement", "postbaseline",
              "followup_outcome", "followup_measurement")


def _allowed(l0: Sequence[str]) -> dict[str, set[str]]:
    base = {"w", *l0}
    return {
        "l0": {"w"},
        "sampling": base,
        "baseline_outcome": base,
        "baseline_measurement": base | {"a", "y0"},
        "postbaseline": base | {"a"},
        "followup_outcome": base | {"a", "l1"},
        "followup_measurement": base | {"a", "l1", "y1"},
    }


@dataclass(frozen=True)
class DGPConfig:
    """Hierarchical trial design plus structural-equation coefficients.

    ``effect_size`` multiplies every term that involves the arm ``a``, in
    every equation.  Under ``interference_mode="cross_partition"`` both
    outcome equations also receive ``cluster_direct * e`` and
    ``neighbour_effect * mean(w of the other partitions)``.
    """

    n_clusters: int = 9
    partitions_per_cluster: int = 2
    individuals_per_partition: int | tuple[int, int] = 400
    l0_names: tuple[str, ...] = ("hh_hiv", "older", "mobile")
    e_sd: float = 1.0
    w_from_e: float = 0.6
    w_sd: float = 1.0
    l0: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: {
        "hh_hiv": {"const": -0.3, "w": 0.2},
        "older": {"const": -0.3},
        "mobile": {"const": -0.5, "w": 0.2},
    })
    sampling: Mapping[str, float] = field(default_factory=lambda: {"const": 0.5, "hh_hiv": 2.0})
    baseline_outcome: Mapping[str, float] = field(default_factory=lambda: {
        "const": -3.0, "hh_hiv": 1.5, "older": 0.4, "w": 0.3})
    baseline_measurement: Mapping[str, float] = field(default_factory=lambda: {
        "const": 2.0, "hh_hiv": -0.5, "a:hh_hiv": 1.0, "older": 0.5, "mobile": -0.5})
    postbaseline: Mapping[str, float] = field(default_factory=lambda: {
        "const": -0.5, "hh_hiv": 0.5, "a": 0.5})
    followup_outcome: Mapping[str, float] = field(default_factory=lambda: {
        "const": -2.5, "hh_hiv": 3.5, "older": 0.3, "w": 1.0, "l1": -0.3, "a": -0.73})
    followup_measurement: Mapping[str, float] = field(default_factory=lambda: {
        "const": 2.0, "hh_hiv": -2.0, "a:hh_hiv": 5.0})
    interference_mode: str = "none"
    neighbour_effect: float = 0.0
    cluster_direct: float = 0.0
    effect_size: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "l0_names", tuple(self.l0_names))
        ipp = self.individuals_per_partition
        if isinstance(ipp, (list, tuple)):
            ipp = (int(ipp[0]), int(ipp[1]))
            if not 1 <= ipp[0] <= ipp[1]:
                raise ValueError("individuals_per_partition range must satisfy 1 <= lo <= hi")
            object.__setattr__(self, "individuals_per_partition", ipp)
        elif int(ipp) < 1:
            raise ValueError("individuals_per_partition must be positive")
        if self.n_clusters < 2 or self.partitions_per_cluster < 1:
            raise ValueError("need at least 2 clusters and 1 partition per cluster")
        if self.interference_mode not in INTERFERENCE_MODES:
            raise ValueError(f"interference_mode must be one of {INTERFERENCE_MODES}")
        if self.e_sd < 0 or self.w_sd < 0:
            raise ValueError("standard deviations must be non-negative")
        allowed = _allowed(self.l0_names)
        if set(self.l0) != set(self.l0_names):
            raise ValueError("l0 coefficients must be given for exactly the names in l0_names")
        for name in self.l0_names:
            _check_terms(f"l0[{name}]", self.l0[name], allowed["l0"])
        for eq in _EQUATIONS:
            _check_terms(eq, getattr(self, eq), allowed[eq])

    def replace(self, **changes) -> "DGPConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["l0_names"] = list(self.l0_names)
        if isinstance(self.individuals_per_partition, tuple):
            out["individuals_per_partition"] = list(self.individuals_per_partition)
        out["l0"] = {k: dict(v) for k, v in self.l0.items()}
        for eq in _EQUATIONS:
            out[eq] = dict(getattr(self, eq))
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "DGPConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown DGP field(s): {sorted(unknown)}")
        return cls(**dict(data))


def _check_terms(eq: str, coefs: Mapping[str, float], allowed: set[str]) -> None:
    for term in coefs:
        if term == "const":
            continue
        for factor in term.split(":"):
            if factor not in allowed:
                raise ValueError(f"{eq}: term {term!r} uses {factor!r}, allowed {sorted(allowed)}")


def _linear(coefs: Mapping[str, float], env: Mapping[str, np.ndarray | float], n: int,
            effect_size: float) -> np.ndarray:
    eta = np.zeros(n)
    for term, b in coefs.items():
        if term == "const":
            eta += b
            continue
        factors = term.split(":")
        val = np.ones(n)
        for f in factors:
            val = val * env[f]
        if "a" in factors:
            b = b * effect_size
        eta += b * val
    return eta


def _prob(coefs, env, n, effect_size) -> np.ndarray:
    return expit(_linear(coefs, env, n, effect_size))


@dataclass(frozen=True, eq=False)
class _Partition:
    n: int
    w_noise: float
    u: np.ndarray  # (n, n_l0 + 6) uniforms


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def _draw_partition(dgp: DGPConfig, rng: np.random.Generator) -> _Partition:
    ipp = dgp.individuals_per_partition
    n = int(rng.integers(ipp[0], ipp[1] + 1)) if isinstance(ipp, tuple) else int(ipp)
    w_noise = float(rng.standard_normal())
    u = rng.random((n, len(dgp.l0_names) + len(_EQUATIONS)))
    return _Partition(n, w_noise, u)


def _latent(dgp: DGPConfig, part: _Partition, w: float, a: int, e: float = 0.0,
            w_other: float = 0.0) -> dict[str, np.ndarray]:
    """Individual-level variables of one partition under arm ``a``."""
    n, u, es = part.n, part.u, dgp.effect_size
    env: dict[str, np.ndarray | float] = {"w": w, "a": float(a)}
    k = len(dgp.l0_names)
    for j, name in enumerate(dgp.l0_names):
        env[name] = (u[:, j] < _prob(dgp.l0[name], env, n, es)).astype(float)
    shift = 0.0
    if dgp.interference_mode == "cross_partition":
        shift = dgp.cluster_direct * e + dgp.neighbour_effect * w_other
    s = u[:, k] < _prob(dgp.sampling, env, n, es)
    y0s = u[:, k + 1] < expit(_linear(dgp.baseline_outcome, env, n, es) + shift)
    env["y0"] = y0s.astype(float)
    d0 = u[:, k + 2] < _prob(dgp.baseline_measurement, env, n, es)
    l1 = u[:, k + 3] < _prob(dgp.postbaseline, env, n, es)
    env["l1"] = l1.astype(float)
    inc = u[:, k + 4] < expit(_linear(dgp.followup_outcome, env, n, es) + shift)
    y1s = y0s | inc
    env["y1"] = y1s.astype(float)
    d1 = u[:, k + 5] < _prob(dgp.followup_measurement, env, n, es)
    out = {name: env[name] for name in dgp.l0_names}
    out.update(s_lat=s, d0_lat=d0, y0_star=y0s, l1=l1, y1_star=y1s, d1_lat=d1)
    return out


def _arms(dgp: DGPConfig, replicate: int) -> np.ndarray:
    rng = _stream(dgp.seed, replicate, _ARM_KEY)
    n = dgp.n_clusters
    n_treated = n // 2 + (int(rng.integers(2)) if n % 2 else 0)
    arms = np.zeros(n, dtype=np.int8)
    arms[rng.permutation(n)[:n_treated]] = 1
    return arms


def _cluster_draws(dgp: DGPConfig, replicate: int, c: int, overrides: Mapping | None):
    e = dgp.e_sd * float(_stream(dgp.seed, replicate, _CLUSTER_KEY, c).standard_normal())
    parts = []
    for j in range(dgp.partitions_per_cluster):
        if overrides and (c, j) in overrides:
            rng = _stream(int(overrides[(c, j)]), replicate, _PARTITION_KEY, c, j)
        else:
            rng = _stream(dgp.seed, replicate, _PARTITION_KEY, c, j)
        parts.append(_draw_partition(dgp, rng))
    ws = np.array([dgp.w_from_e * e + dgp.w_sd * p.w_noise for p in parts])
    return e, parts, ws


def _w_other(ws: np.ndarray, j: int) -> float:
    if len(ws) == 1:
        return 0.0
    return float((ws.sum() - ws[j]) / (len(ws) - 1))


def generate(dgp: DGPConfig, replicate: int = 0, force_measurement: bool = False,
             latent: bool = False, stream_overrides: Mapping[tuple[int, int], int] | None = None) -> pd.DataFrame:
    """Draw one trial in the canonical long format.

    Parameters
    ----------
    dgp : DGPConfig
    replicate : int
        Replicate index; together with ``dgp.seed`` it keys every stream.
    force_measurement : bool
        Set S = Δ0 = 1 for everyone and Δ1 = 1 for the incidence cohort.
    latent : bool
        Append the latent outcomes as ``y0_star`` / ``y1_star``.
    stream_overrides : dict, optional
        ``{(cluster_index, partition_index): seed}`` replaces that partition's
        stream, leaving every other draw untouched.

    Returns
    -------
    pandas.DataFrame
        Typed frame with the ``data_model`` columns (``e_env``, ``w_risk``,
        ``l0_*`` and ``l1_*`` covariates).
    """
    arms = _arms(dgp, replicate)
    width = len(str(max(dgp.n_clusters, 10)))
    frames = []
    for c in range(dgp.n_clusters):
        e, parts, ws = _cluster_draws(dgp, replicate, c, stream_overrides)
        for j, part in enumerate(parts):
            a = int(arms[c])
            lat = _latent(dgp, part, float(ws[j]), a, e, _w_other(ws, j))
            frames.append(_observed(dgp, lat, part.n, f"c{c + 1:0{width}d}", f"p{j + 1}", a, e,
                                    float(ws[j]), force_measurement, latent))
    return pd.concat(frames, ignore_index=True)


def _observed(dgp, lat, n, cid, pid, a, e, w, force, keep_latent) -> pd.DataFrame:
    y0s, y1s = lat["y0_star"], lat["y1_star"]
    if force:
        s = np.ones(n, dtype=bool)
        d0 = s.copy()
        d1 = ~y0s
    else:
        s = lat["s_lat"]
        d0 = s & lat["d0_lat"]
        d1 = d0 & ~y0s & lat["d1_lat"]
    y0 = d0 & y0s
    y1 = d1 & y1s
    cols = {
        "cluster_id": np.full(n, cid, dtype=object),
        "partition_id": np.full(n, pid, dtype=object),
        "individual_id": np.array([f"{pid}-{i + 1:05d}" for i in range(n)], dtype=object),
        "a": np.full(n, a, dtype=np.int8),
        "s": s.astype(np.int8), "d0": d0.astype(np.int8), "y0": y0.astype(np.int8),
        "d1": d1.astype(np.int8), "y1": y1.astype(np.int8),
        "e_env": np.full(n, e), "w_risk": np.full(n, w),
    }
    for name in dgp.l0_names:
        cols[f"l0_{name}"] = lat[name]
    cols["l1_x"] = lat["l1"].astype(float)
    if keep_latent:
        cols["y0_star"] = y0s.astype(np.int8)
        cols["y1_star"] = y1s.astype(np.int8)
    return pd.DataFrame(cols)


def generate_units(dgp: DGPConfig, unit_level: str = "partition", replicate: int = 0):
    """``generate`` followed by grouping into analysis units."""
    return group_units(validate_frame(generate(dgp, replicate)), unit_level, validated=True)


@dataclass(frozen=True)
class TruthReport:
    """Counterfactual targets under forced measurement, per arm.

    Arm-level values average the unit-level quantities over units;
    ``mc_se`` maps each reported quantity to its batch-means Monte Carlo SE.
    """

    unit_level: str
    true_psi_den: tuple[float, float]
    true_psi_num: tuple[float, float]
    true_endpoint: tuple[float, float]
    true_rr: float
    true_rd: float
    mc_reps: int
    n_units: int
    mc_se: Mapping[str, float]

    @property
    def true_log_rr(self) -> float:
        return float(np.log(self.true_rr))

    def as_dict(self) -> dict:
        return {
            "unit_level": self.unit_level,
            "true_psi_den": list(self.true_psi_den),
            "true_psi_num": list(self.true_psi_num),
            "true_endpoint": list(self.true_endpoint),
            "true_rr": self.true_rr,
            "true_rd": self.true_rd,
            "mc_reps": self.mc_reps,
            "n_units": self.n_units,
            "mc_se": dict(self.mc_se),
        }


def _unit_truths(dgp: DGPConfig, replicate: int, c: int, unit_level: str) -> list[np.ndarray]:
    """Per-unit (den0, num0, den1, num1) under forced measurement with common random numbers."""
    e, parts, ws = _cluster_draws(dgp, replicate, c, None)
    sums = []
    for j, part in enumerate(parts):
        row = []
        for a in (0, 1):
            lat = _latent(dgp, part, float(ws[j]), a, e, _w_other(ws, j))
            y0s, y1s = lat["y0_star"], lat["y1_star"]
            row += [y0s.sum(), (y1s & ~y0s).sum()]
        sums.append(np.array(row + [part.n], dtype=float))
    if unit_level == "cluster":
        sums = [np.sum(sums, axis=0)]
    return [s[:4] / s[4] for s in sums]


def _arm_summary(vals: np.ndarray) -> np.ndarray:
    """Arm-level (den0, num0, end0, den1, num1, end1, rr, rd) from unit rows."""
    end0 = vals[:, 1] / (1.0 - vals[:, 0])
    end1 = vals[:, 3] / (1.0 - vals[:, 2])
    m = [vals[:, 0].mean(), vals[:, 1].mean(), end0.mean(),
         vals[:, 2].mean(), vals[:, 3].mean(), end1.mean()]
    return np.array(m + [m[5] / m[2], m[5] - m[2]])


_TRUTH_FIELDS = ("psi_den_0", "psi_num_0", "endpoint_0", "psi_den_1", "psi_num_1", "endpoint_1", "rr", "rd")


def true_parameters(dgp: DGPConfig, mc_reps: int = 1_000_000, unit_level: str = "partition",
                    batches: int = 20) -> TruthReport:
    """Monte Carlo truth with measurement forced (S = Δ0 = Δ1 = 1) under each arm.

    Parameters
    ----------
    mc_reps : int
        Minimum number of simulated individuals (at least 1e5).
    unit_level : {"partition", "cluster"}
        Cluster truths pool the cluster's partitions, matching cluster-level
        Stage 1 estimation.
    batches : int
        Number of batches for the Monte Carlo standard error.
    """
    if mc_reps < 100_000:
        raise ValueError("mc_reps must be at least 1e5 individuals")
    ipp = dgp.individuals_per_partition
    mean_n = (ipp[0] + ipp[1]) / 2 if isinstance(ipp, tuple) else ipp
    per_cluster = mean_n * dgp.partitions_per_cluster
    clusters_per_batch = max(2, int(np.ceil(mc_reps / (batches * per_cluster))))
    batch_stats, all_units = [], []
    for b in range(batches):
        vals = []
        for c in range(clusters_per_batch):
            vals += _unit_truths(dgp, _TRUTH_REPLICATE, b * clusters_per_batch + c, unit_level)
        vals = np.array(vals)
        all_units.append(vals)
        batch_stats.append(_arm_summary(vals))
    units = np.vstack(all_units)
    point = _arm_summary(units)
    se = np.std(np.array(batch_stats), axis=0, ddof=1) / np.sqrt(batches)
    return TruthReport(
        unit_level=unit_level,
        true_psi_den=(float(point[0]), float(point[3])),
        true_psi_num=(float(point[1]), float(point[4])),
        true_endpoint=(float(point[2]), float(point[5])),
        true_rr=float(point[6]),
        true_rd=float(point[7]),
        mc_reps=int(batches * clusters_per_batch * per_cluster),
        n_units=len(units),
        mc_se={k: float(v) for k, v in zip(_TRUTH_FIELDS, se)},
    )


# ---------------------------------------------------------------------------
# identification check at a fixed partition covariate value


def _l0_cells(dgp: DGPConfig, w: float):
    """Enumerate baseline covariate cells with their probabilities given ``w``."""
    k = len(dgp.l0_names)
    for bits in itertools.product((0.0, 1.0), repeat=k):
        env = {"w": w, **dict(zip(dgp.l0_names, bits))}
        p = 1.0
        for name, x in zip(dgp.l0_names, bits):
            q = float(_prob(dgp.l0[name], {"w": w}, 1, dgp.effect_size)[0])
            p *= q if x else 1.0 - q
        yield env, p


def _p(coefs, env, dgp) -> float:
    return float(_prob(coefs, env, 1, dgp.effect_size)[0])


def statistical_estimand(dgp: DGPConfig, w: float, a: int) -> dict[str, float]:
    """Observed-data estimand for one partition, by exact enumeration.

    The joint law of the observed data is built from the structural equations
    over every discrete covariate cell, and the identifying functional is
    evaluated from observed-data conditionals only::

        den = sum_l0 P(l0) P(Y0=1 | S=1, d0=1, l0)
        num = sum_l0 P(l0) P(Y0=0 | S=1, d0=1, l0)
              * sum_l1 P(l1 | cohort, l0) P(Y1=1 | d1=1, l1, cohort, l0)

    When measurement is missing at random this equals the counterfactual
    target; MNAR coefficients (terms in ``y0`` / ``y1``) make it differ.
    """
    if dgp.interference_mode != "none":
        raise ValueError("the closed form assumes interference_mode='none'")
    den = num = 0.0
    for env, p_l0 in _l0_cells(dgp, w):
        env = dict(env, a=float(a))
        ps = _p(dgp.sampling, env, dgp)
        py0 = _p(dgp.baseline_outcome, env, dgp)
        # joint of (S=1, d0=1, Y0*=y)
        j1 = ps * py0 * _p(dgp.baseline_measurement, dict(env, y0=1.0), dgp)
        j0 = ps * (1.0 - py0) * _p(dgp.baseline_measurement, dict(env, y0=0.0), dgp)
        if j1 + j0 == 0:
            raise ValueError("positivity fails at baseline")
        prev = j1 / (j0 + j1)
        den += p_l0 * prev
        inner = 0.0
        for l1 in (0.0, 1.0):
            pl1 = _p(dgp.postbaseline, env, dgp)
            pl1 = pl1 if l1 else 1.0 - pl1
            e1 = dict(env, l1=l1, y0=0.0)
            py1 = _p(dgp.followup_outcome, e1, dgp)
            m1 = py1 * _p(dgp.followup_measurement, dict(e1, y1=1.0), dgp)
            m0 = (1.0 - py1) * _p(dgp.followup_measurement, dict(e1, y1=0.0), dgp)
            inner += pl1 * m1 / (m1 + m0)
        num += p_l0 * (1.0 - prev) * inner
    return {"psi_den": den, "psi_num": num, "endpoint": num / (1.0 - den)}


def counterfactual_truth(dgp: DGPConfig, w: float, a: int, n_individuals: int = 1_000_000,
                         batches: int = 20, seed: int | None = None) -> dict[str, float]:
    """Forced-measurement Monte Carlo truth for one partition with covariate ``w``.

    Returns point values and batch-means standard errors (``*_se`` keys).
    """
    if dgp.interference_mode != "none":
        raise ValueError("a fixed-w truth assumes interference_mode='none'")
    per = int(np.ceil(n_individuals / batches))
    seed = dgp.seed if seed is None else seed
    rows = []
    for b in range(batches):
        rng = _stream(seed, _WORLD_REPLICATE, b)
        part = _Partition(per, 0.0, rng.random((per, len(dgp.l0_names) + len(_EQUATIONS))))
        lat = _latent(dgp, part, w, a)
        y0s, y1s = lat["y0_star"], lat["y1_star"]
        rows.append((y0s.mean(), (y1s & ~y0s).mean(), (y1s & ~y0s).sum() / max((~y0s).sum(), 1)))
    rows = np.array(rows)
    den, num = rows[:, 0].mean(), rows[:, 1].mean()
    se = rows.std(axis=0, ddof=1) / np.sqrt(batches)
    return {"psi_den": float(den), "psi_num": float(num), "endpoint": float(num / (1.0 - den)),
            "psi_den_se": float(se[0]), "psi_num_se": float(se[1]), "endpoint_se": float(se[2]),
            "n_individuals": per * batches}


# ---------------------------------------------------------------------------
# replication studies


def search_like_dgp(**changes) -> DGPConfig:
    """Nine clusters of two partitions with ~400 residents each.

    Sampling is enriched on household HIV exposure (``hh_hiv``), which also
    raises TB risk, and follow-up measurement of exposed people is far higher
    in the intervention arm.  Partitions within a cluster differ markedly in
    the prognostic covariate ``w``.  Calibrated so the partition-level true
    RR is close to 0.75, the fully unadjusted estimator points the wrong way,
    and every baseline covariate cell keeps enough measured cohort members
    per partition for Stage 1 to be well supported.
    """
    return DGPConfig(**changes)


def replicate_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(replicate,)).generate_state(1)[0])


@dataclass(frozen=True)
class StudyConfig:
    """An analysis configuration labelled for a replication study."""

    config_id: str
    config: AnalysisConfig


def _one_replicate(r: int, dgp: DGPConfig, studies: Sequence[StudyConfig]) -> list[dict]:
    frame = validate_frame(generate(dgp, replicate=r))
    units_by_level: dict = {}
    cache: dict = {}
    out = []
    for st in studies:
        cfg = st.config.replace(seed=replicate_seed(st.config.seed, r))
        level = cfg.unit_level
        if level not in units_by_level:
            units_by_level[level] = group_units(frame, level, validated=True)
        units = units_by_level[level]
        key = (level, cfg.stage1_adjustment, cfg.stage1_adjustment_l1, cfg.stage1_learners,
               cfg.cv_folds, cfg.sl_restarts, cfg.g_bound, cfg.seed)
        rec = {"replicate": r, "config_id": st.config_id, "unit_level": level}
        try:
            if key not in cache:
                cache[key] = estimate_endpoints(units, cfg)
            est = tmle_effect(rows_from_estimates(units, cache[key]), cfg)
            rec.update(point=est.point, log_point=est.log_point, se=est.se,
                       ci_lower=est.ci_lower, ci_upper=est.ci_upper, failed=False, error="")
        except (Stage1Error, Stage2Error, ValueError, np.linalg.LinAlgError) as exc:
            rec.update(point=np.nan, log_point=np.nan, se=np.nan, ci_lower=np.nan,
                       ci_upper=np.nan, failed=True, error=f"{type(exc).__name__}: {exc}")
        out.append(rec)
    return out


def run_replicates(dgp: DGPConfig, studies: Sequence[StudyConfig], n_reps: int,
                   threads: int = 1) -> pd.DataFrame:
    """Per-replicate estimates, one row per (replicate, config)."""
    if n_reps < 2:
        raise ValueError("n_reps must be at least 2")
    studies = list(studies)
    ids = [s.config_id for s in studies]
    if len(set(ids)) != len(ids):
        raise ValueError("config ids must be unique")
    chunks = pool_map(_one_replicate, list(range(n_reps)), threads, dgp, studies)
    return pd.DataFrame([rec for chunk in chunks for rec in chunk])


def summarize(raw: pd.DataFrame, truths: Mapping[str, TruthReport], scale: str = "risk_ratio",
              studies: Sequence[StudyConfig] | None = None) -> pd.DataFrame:
    """Operating characteristics per config.

    Bias and SEs are on the log scale for ratios and the natural scale for
    differences; ``mc_se_bias`` is the Monte Carlo SE of the mean bias.
    """
    rows = []
    order = [s.config_id for s in studies] if studies else list(dict.fromkeys(raw["config_id"]))
    for cid in order:
        sub = raw[raw["config_id"] == cid]
        ok = sub[~sub["failed"].astype(bool)]
        truth = truths[sub["unit_level"].iat[0]]
        if scale == "risk_ratio":
            est = ok["log_point"].to_numpy(dtype=float)
            target, null = truth.true_log_rr, 0.0
            lo, hi = np.log(ok["ci_lower"].to_numpy(float)), np.log(ok["ci_upper"].to_numpy(float))
        else:
            est = ok["point"].to_numpy(dtype=float)
            target, null = truth.true_rd, 0.0
            lo, hi = ok["ci_lower"].to_numpy(float), ok["ci_upper"].to_numpy(float)
        n_ok = len(ok)
        emp = float(np.std(est, ddof=1)) if n_ok > 1 else np.nan
        rows.append({
            "config_id": cid,
            "n_reps": len(sub),
            "n_fail": int(len(sub) - n_ok),
            "truth": target,
            "mean_estimate": float(np.mean(est)) if n_ok else np.nan,
            "mean_point": float(ok["point"].mean()) if n_ok else np.nan,
            "bias": float(np.mean(est) - target) if n_ok else np.nan,
            "mc_se_bias": emp / np.sqrt(n_ok) if n_ok > 1 else np.nan,
            "emp_se": emp,
            "mean_se": float(ok["se"].mean()) if n_ok else np.nan,
            "coverage": float(np.mean((lo <= target) & (target <= hi))) if n_ok else np.nan,
            "rejection": float(np.mean((hi < null) | (lo > null))) if n_ok else np.nan,
            "mean_ci_width": float(np.mean(hi - lo)) if n_ok else np.nan,
        })
    return pd.DataFrame(rows)


def replicate_study(dgp: DGPConfig, analysis_configs: Sequence[AnalysisConfig] | Sequence[StudyConfig],
                    n_reps: int, mc_reps: int = 1_000_000, threads: int = 1,
                    truths: Mapping[str, TruthReport] | None = None) -> "StudyResult":
    """Simulate ``n_reps`` trials and analyse each with every configuration.

    Estimation failures in a replicate are recorded and counted, never raised.
    All configurations must share one effect scale.
    """
    studies = [c if isinstance(c, StudyConfig) else StudyConfig(f"config_{i}", c)
               for i, c in enumerate(analysis_configs)]
    scales = {s.config.effect_scale for s in studies}
    if len(scales) != 1:
        raise ValueError("all configurations must use the same effect scale")
    start = time.perf_counter()
    raw = run_replicates(dgp, studies, n_reps, threads)
    truths = dict(truths or {})
    for level in sorted({s.config.unit_level for s in studies}):
        if level not in truths:
            truths[level] = true_parameters(dgp, mc_reps, level)
    table = summarize(raw, truths, scales.pop(), studies)
    return StudyResult(table, raw, truths, time.perf_counter() - start)


@dataclass(frozen=True, eq=False)
class StudyResult:
    table: pd.DataFrame
    raw: pd.DataFrame
    truths: Mapping[str, TruthReport]
    seconds: float = field(default=0.0, compare=False)
