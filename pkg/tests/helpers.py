"""Builders for small synthetic units used across the test modules."""
from __future__ import annotations

import numpy as np
import pandas as pd

from twostage_tmle.data_model import UnitData, group_units, validate_frame
from twostage_tmle.stage2 import UnitRow


def make_unit(s, d0, y0, d1, y1, covariates=None, arm=1, unit_id="u1", unit_covariates=None) -> UnitData:
    n = len(s)
    arr = lambda x: np.asarray(x, dtype=np.int8)  # noqa: E731
    return UnitData(
        unit_id=unit_id, unit_level="partition", arm=arm,
        unit_covariates=dict(unit_covariates or {}),
        cluster_id=np.full(n, "c1", dtype=object),
        partition_id=np.full(n, "p1", dtype=object),
        individual_id=np.array([f"i{i:05d}" for i in range(n)], dtype=object),
        s=arr(s), d0=arr(d0), y0=arr(y0), d1=arr(d1), y1=arr(y1),
        covariates={k: np.asarray(v, dtype=float) for k, v in (covariates or {}).items()},
    )


def random_unit(rng: np.random.Generator, n: int = 400, n_l0: int = 2, with_l1: bool = False,
                complete: bool = False, arm: int = 1, unit_id: str = "u1") -> UnitData:
    """Coarsened data with measurement and outcomes depending on binary covariates."""
    l0 = {f"l0_x{j}": (rng.random(n) < rng.uniform(0.3, 0.7)).astype(float) for j in range(n_l0)}
    risk = sum(l0.values()) if l0 else np.zeros(n)
    y0s = rng.random(n) < 0.05 + 0.06 * risk
    l1 = (rng.random(n) < 0.3 + 0.2 * (l0.get("l0_x0", 0))).astype(float)
    y1s = y0s | (rng.random(n) < 0.12 + 0.08 * risk + (0.1 * l1 if with_l1 else 0))
    if complete:
        s = np.ones(n, bool)
        d0 = s.copy()
        d1 = ~y0s
    else:
        s = rng.random(n) < 0.55 + 0.15 * (l0.get("l0_x0", 0))
        d0 = s & (rng.random(n) < 0.8 - 0.1 * risk)
        d1 = d0 & ~y0s & (rng.random(n) < 0.75 - 0.1 * risk - (0.15 * l1 if with_l1 else 0))
    covs = dict(l0)
    covs["l1_z"] = l1
    return make_unit(s, d0, d0 & y0s, d1, d1 & y1s, covs, arm=arm, unit_id=unit_id)


def unit_records(unit: UnitData) -> list[dict]:
    out = []
    for i in range(len(unit)):
        r = {"s": int(unit.s[i]), "d0": int(unit.d0[i]), "y0": int(unit.y0[i]),
             "d1": int(unit.d1[i]), "y1": int(unit.y1[i])}
        r.update({k: float(v[i]) for k, v in unit.covariates.items()})
        out.append(r)
    return out


def frame_from_units(units) -> pd.DataFrame:
    from twostage_tmle.data_model import units_to_frame

    return units_to_frame(units)


def regroup(frame: pd.DataFrame, level: str):
    return group_units(validate_frame(frame), level, validated=True)


def rows_from(endpoints, arms, **adjusters) -> list[UnitRow]:
    return [
        UnitRow(f"u{i:02d}", int(a), {k: float(v[i]) for k, v in adjusters.items()}, float(y))
        for i, (y, a) in enumerate(zip(endpoints, arms))
    ]
