"""Domain types, the long-format CSV schema and validation for hierarchical trial data.

One row of the input file is one participant.  Required columns are::

    cluster_id, partition_id, individual_id, a, s, d0, y0, d1, y1

Covariate columns are recognised by prefix: ``l0_`` (baseline, individual),
``l1_`` (post-baseline, individual), ``w_`` (partition level) and ``e_``
(cluster level).  Unit-level columns are repeated on every row and must be
constant within their unit.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence, Union

import numpy as np
import pandas as pd

ID_COLUMNS = ("cluster_id", "partition_id", "individual_id")
BINARY_COLUMNS = ("a", "s", "d0", "y0", "d1", "y1")
REQUIRED_COLUMNS = ID_COLUMNS + BINARY_COLUMNS
COVARIATE_PREFIXES = ("e_", "w_", "l0_", "l1_")
UNIT_LEVELS = ("cluster", "partition")
STAGE2_MODES = ("randomized", "pseudo_observational", "unadjusted")
EFFECT_SCALES = ("risk_ratio", "risk_difference")

PathOrBuffer = Union[str, os.PathLike, IO[str]]


class DataValidationError(ValueError):
    """Raised when input data violate the schema or the coarsening rules."""


@dataclass(frozen=True)
class IndividualRecord:
    cluster_id: str
    partition_id: str
    individual_id: str
    arm: int
    sampled: int
    measured_baseline: int
    outcome_baseline: int
    measured_followup: int
    outcome_followup: int
    baseline_covariates: Mapping[str, float] = field(default_factory=dict)
    postbaseline_covariates: Mapping[str, float] = field(default_factory=dict)

    def violations(self) -> list[str]:
        """Return the coarsening rules this record breaks (empty when valid)."""
        out = []
        if self.measured_baseline and not self.sampled:
            out.append("d0=1 requires s=1")
        if self.outcome_baseline and not self.measured_baseline:
            out.append("y0=1 requires d0=1")
        if self.outcome_followup and not self.measured_followup:
            out.append("y1=1 requires d1=1")
        if self.measured_followup and (not self.measured_baseline or self.outcome_baseline):
            out.append("d1=1 requires d0=1 and y0=0")
        return out


@dataclass(frozen=True, eq=False)
class UnitData:
    """All participants of one analysis unit, stored column-wise.

    ``covariates`` holds every per-record covariate column (``e_``, ``w_``,
    ``l0_``, ``l1_``) in file order; ``unit_covariates`` holds the unit-level
    adjusters (``e_`` columns plus partition means of ``w_`` columns for a
    cluster, ``w_`` columns for a partition).
    """

    unit_id: str
    unit_level: str
    arm: int
    unit_covariates: Mapping[str, float]
    cluster_id: np.ndarray
    partition_id: np.ndarray
    individual_id: np.ndarray
    s: np.ndarray
    d0: np.ndarray
    y0: np.ndarray
    d1: np.ndarray
    y1: np.ndarray
    covariates: Mapping[str, np.ndarray]

    def __post_init__(self):
        if self.unit_level not in UNIT_LEVELS:
            raise ValueError(f"unit_level must be one of {UNIT_LEVELS}")
        if len(self.individual_id) == 0:
            raise DataValidationError(f"unit {self.unit_id!r} has no records")
        for arr in (self.s, self.d0, self.y0, self.d1, self.y1, *self.covariates.values()):
            if len(arr) != len(self.individual_id):
                raise ValueError("column lengths differ")
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.individual_id)

    @property
    def l0_names(self) -> list[str]:
        return [c for c in self.covariates if c.startswith("l0_")]

    @property
    def l1_names(self) -> list[str]:
        return [c for c in self.covariates if c.startswith("l1_")]

    def columns(self, names: Sequence[str]) -> dict[str, np.ndarray]:
        missing = [n for n in names if n not in self.covariates]
        if missing:
            raise KeyError(f"unit {self.unit_id!r} has no covariate(s) {missing}")
        return {n: self.covariates[n] for n in names}

    @property
    def records(self) -> list[IndividualRecord]:
        l0, l1 = self.l0_names, self.l1_names
        return [
            IndividualRecord(
                cluster_id=str(self.cluster_id[i]),
                partition_id=str(self.partition_id[i]),
                individual_id=str(self.individual_id[i]),
                arm=int(self.arm),
                sampled=int(self.s[i]),
                measured_baseline=int(self.d0[i]),
                outcome_baseline=int(self.y0[i]),
                measured_followup=int(self.d1[i]),
                outcome_followup=int(self.y1[i]),
                baseline_covariates={n: float(self.covariates[n][i]) for n in l0},
                postbaseline_covariates={n: float(self.covariates[n][i]) for n in l1},
            )
            for i in range(len(self))
        ]

    def cohort_mask(self) -> np.ndarray:
        return (self.d0 == 1) & (self.y0 == 0)


@dataclass(frozen=True)
class AnalysisConfig:
    """Settings for one end-to-end analysis.

    ``stage1_adjustment`` is a list of ``l0_`` column names or the string
    ``"unadjusted"``; ``stage1_adjustment_l1`` lists ``l1_`` columns added to
    the follow-up regressions.  ``stage2_adjustment`` of ``None`` means every
    unit-level covariate.
    """

    unit_level: str = "partition"
    stage1_adjustment: Union[tuple[str, ...], str] = "unadjusted"
    stage1_adjustment_l1: tuple[str, ...] = ()
    stage1_learners: tuple[str, ...] = ("intercept_only_mean", "main_terms_logistic", "saturated_logistic")
    stage2_mode: str = "unadjusted"
    stage2_adjustment: tuple[str, ...] | None = None
    stage2_known_g: float | None = None
    effect_scale: str = "risk_ratio"
    g_bound: float = 0.025
    cv_folds: int = 10
    sl_restarts: int = 10
    seed: int = 0
    weighting: str = "equal_unit"

    def __post_init__(self):
        if self.unit_level not in UNIT_LEVELS:
            raise ValueError(f"unit_level must be one of {UNIT_LEVELS}, got {self.unit_level!r}")
        if self.stage2_mode not in STAGE2_MODES:
            raise ValueError(f"stage2_mode must be one of {STAGE2_MODES}, got {self.stage2_mode!r}")
        if self.effect_scale not in EFFECT_SCALES:
            raise ValueError(f"effect_scale must be one of {EFFECT_SCALES}, got {self.effect_scale!r}")
        if not 0 < self.g_bound < 0.5:
            raise ValueError("g_bound must lie in (0, 0.5)")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        if self.weighting != "equal_unit":
            raise ValueError("only equal_unit weighting is supported")
        if self.stage2_known_g is not None and not 0 < self.stage2_known_g < 1:
            raise ValueError("stage2_known_g must lie in (0, 1)")
        adj = self.stage1_adjustment
        if isinstance(adj, str):
            if adj != "unadjusted":
                raise ValueError("stage1_adjustment must be a list of names or 'unadjusted'")
        else:
            object.__setattr__(self, "stage1_adjustment", tuple(adj))
        object.__setattr__(self, "stage1_adjustment_l1", tuple(self.stage1_adjustment_l1))
        object.__setattr__(self, "stage1_learners", tuple(self.stage1_learners))
        if not self.stage1_learners:
            raise ValueError("stage1_learners must not be empty")
        if self.stage2_adjustment is not None:
            object.__setattr__(self, "stage2_adjustment", tuple(self.stage2_adjustment))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def stage1_adjusted(self) -> bool:
        return not isinstance(self.stage1_adjustment, str)

    def replace(self, **changes) -> "AnalysisConfig":
        from dataclasses import replace

        return replace(self, **changes)


def _row_error(row: int, msg: str) -> DataValidationError:
    # row numbers count the header as line 1
    return DataValidationError(f"row {row}: {msg}")


def _parse_binary(frame: pd.DataFrame, col: str) -> np.ndarray:
    raw = frame[col].to_numpy(dtype=object)
    bad = ~np.isin(raw, ("0", "1"))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise _row_error(i + 2, f"column {col!r} must be 0 or 1, got {raw[i]!r}")
    return (raw == "1").astype(np.int8)


def _parse_real(frame: pd.DataFrame, col: str) -> np.ndarray:
    raw = frame[col].to_numpy(dtype=object)
    out = np.empty(len(raw), dtype=float)
    for i, v in enumerate(raw):
        v = v.strip()
        if v == "":
            raise _row_error(i + 2, f"missing value in covariate column {col!r}")
        try:
            out[i] = float(v)
        except ValueError:
            raise _row_error(i + 2, f"non-numeric value {v!r} in column {col!r}") from None
        if not np.isfinite(out[i]):
            raise _row_error(i + 2, f"non-finite value {v!r} in column {col!r}")
    return out


def read_table(source: PathOrBuffer, schema_mapping: Mapping[str, str] | None = None) -> pd.DataFrame:
    """Read a long-format CSV as strings, renaming columns via ``schema_mapping``."""
    frame = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    if schema_mapping:
        frame = frame.rename(columns=dict(schema_mapping))
    return frame


def validate_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Check schema and coarsening rules; return a typed copy.

    Binary columns come back as int8, covariates as float64, identifiers as str.
    Row numbers in error messages refer to file lines (header = line 1).
    """
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataValidationError(f"missing required column(s): {', '.join(missing)}")
    if len(frame) == 0:
        raise DataValidationError("no data rows")
    typed = {}
    for c in ID_COLUMNS:
        ids = frame[c].astype(str).to_numpy(dtype=object)
        empty = np.flatnonzero(ids == "")
        if len(empty):
            raise _row_error(int(empty[0]) + 2, f"empty identifier in {c!r}")
        typed[c] = ids
    for c in BINARY_COLUMNS:
        typed[c] = _parse_binary(frame, c) if frame[c].dtype == object else _check_int_binary(frame, c)
    cov_cols = [c for c in frame.columns if c.startswith(COVARIATE_PREFIXES)]
    for c in cov_cols:
        typed[c] = _parse_real(frame, c) if frame[c].dtype == object else frame[c].to_numpy(dtype=float)
    out = pd.DataFrame(typed, columns=list(REQUIRED_COLUMNS) + cov_cols)

    s, d0, y0, d1, y1 = (out[c].to_numpy() for c in ("s", "d0", "y0", "d1", "y1"))
    rules = (
        ((d0 == 1) & (s == 0), "d0=1 requires s=1 (unsampled participants cannot be measured)"),
        ((y0 == 1) & (d0 == 0), "y0=1 requires d0=1"),
        ((y1 == 1) & (d1 == 0), "y1=1 requires d1=1"),
        ((d1 == 1) & ((d0 == 0) | (y0 == 1)), "d1=1 requires d0=1 and y0=0 (incidence cohort only)"),
    )
    for bad, msg in rules:
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise _row_error(i + 2, f"{msg}; individual {out['individual_id'].iat[i]!r}")

    _check_constant(out, "cluster_id", ["a"] + [c for c in cov_cols if c.startswith("e_")])
    _check_constant(out, ["cluster_id", "partition_id"], [c for c in cov_cols if c.startswith("w_")])
    dup = out.duplicated(["cluster_id", "individual_id"]).to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise _row_error(i + 2, f"duplicate individual_id {out['individual_id'].iat[i]!r} within cluster")
    return out


def _check_int_binary(frame: pd.DataFrame, col: str) -> np.ndarray:
    raw = frame[col].to_numpy()
    bad = ~np.isin(raw, (0, 1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise _row_error(i + 2, f"column {col!r} must be 0 or 1, got {raw[i]!r}")
    return raw.astype(np.int8)


def _check_constant(frame: pd.DataFrame, keys, cols: list[str]) -> None:
    if not cols:
        return
    nun = frame.groupby(keys, sort=False)[cols].nunique()
    for col in cols:
        bad = nun.index[nun[col].to_numpy() > 1]
        if len(bad):
            what = "arm" if col == "a" else f"column {col!r}"
            raise DataValidationError(f"{what} varies within {keys} {bad[0]}")


def _unit_key(frame: pd.DataFrame, unit_level: str) -> np.ndarray:
    if unit_level == "cluster":
        return frame["cluster_id"].to_numpy(dtype=object)
    return (frame["cluster_id"] + "/" + frame["partition_id"]).to_numpy(dtype=object)


def group_units(frame: pd.DataFrame, unit_level: str = "cluster", validated: bool = False) -> list[UnitData]:
    """Group a long-format frame into :class:`UnitData`, sorted by (unit_id, individual_id).

    Partition units are identified as ``"<cluster_id>/<partition_id>"``.
    """
    if unit_level not in UNIT_LEVELS:
        raise ValueError(f"unit_level must be one of {UNIT_LEVELS}")
    if not validated:
        frame = validate_frame(frame)
    keys = _unit_key(frame, unit_level)
    order = np.lexsort((frame["individual_id"].to_numpy(dtype=object).astype(str), keys.astype(str)))
    frame = frame.iloc[order].reset_index(drop=True)
    keys = keys[order]
    cov_cols = [c for c in frame.columns if c.startswith(COVARIATE_PREFIXES)]
    e_cols = [c for c in cov_cols if c.startswith("e_")]
    w_cols = [c for c in cov_cols if c.startswith("w_")]

    units = []
    bounds = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1], True])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sub = frame.iloc[lo:hi]
        if unit_level == "partition":
            unit_cov = {c: float(sub[c].iat[0]) for c in w_cols}
        else:
            unit_cov = {c: float(sub[c].iat[0]) for c in e_cols}
            if w_cols:
                # equal weight per partition, matching the partition-level estimand
                part_means = sub.groupby("partition_id", sort=True)[w_cols].first().mean()
                unit_cov.update({c: float(part_means[c]) for c in w_cols})
        units.append(
            UnitData(
                unit_id=str(keys[lo]),
                unit_level=unit_level,
                arm=int(sub["a"].iat[0]),
                unit_covariates=unit_cov,
                cluster_id=sub["cluster_id"].to_numpy(dtype=object),
                partition_id=sub["partition_id"].to_numpy(dtype=object),
                individual_id=sub["individual_id"].to_numpy(dtype=object),
                s=sub["s"].to_numpy(dtype=np.int8),
                d0=sub["d0"].to_numpy(dtype=np.int8),
                y0=sub["y0"].to_numpy(dtype=np.int8),
                d1=sub["d1"].to_numpy(dtype=np.int8),
                y1=sub["y1"].to_numpy(dtype=np.int8),
                covariates={c: sub[c].to_numpy(dtype=float) for c in cov_cols},
            )
        )
    return units


def ingest(
    csv_source: PathOrBuffer,
    schema_mapping: Mapping[str, str] | None = None,
    unit_level: str = "cluster",
) -> list[UnitData]:
    """Read, validate and group a long-format trial file.

    Parameters
    ----------
    csv_source : path or text buffer
        UTF-8, comma separated, header row required.
    schema_mapping : dict, optional
        Maps file column names onto the canonical names.
    unit_level : {"cluster", "partition"}
        Conditionally independent unit to group by.
    """
    return group_units(read_table(csv_source, schema_mapping), unit_level)


def _fmt_real(x: float) -> str:
    return repr(float(x))


def units_to_frame(units: Iterable[UnitData]) -> pd.DataFrame:
    """Stack units back into one long frame (rows sorted by cluster, partition, individual)."""
    units = list(units)
    cov_cols = list(units[0].covariates) if units else []
    parts = []
    for u in units:
        cols = {
            "cluster_id": u.cluster_id,
            "partition_id": u.partition_id,
            "individual_id": u.individual_id,
            "a": np.full(len(u), u.arm, dtype=np.int8),
            "s": u.s, "d0": u.d0, "y0": u.y0, "d1": u.d1, "y1": u.y1,
        }
        cols.update({c: u.covariates[c] for c in cov_cols})
        parts.append(pd.DataFrame(cols))
    frame = pd.concat(parts, ignore_index=True)
    return frame.sort_values(["cluster_id", "partition_id", "individual_id"], kind="mergesort").reset_index(drop=True)


def write_frame(frame: pd.DataFrame, target: PathOrBuffer) -> None:
    """Write a typed long frame in the canonical CSV format (floats via ``repr``)."""
    cov_cols = [c for c in frame.columns if c.startswith(COVARIATE_PREFIXES)]
    header = list(REQUIRED_COLUMNS) + cov_cols
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    cols = [frame[c].to_numpy() for c in header]
    n_id, n_bin = len(ID_COLUMNS), len(BINARY_COLUMNS)
    for i in range(len(frame)):
        row = [str(cols[j][i]) for j in range(n_id)]
        row += [str(int(cols[j][i])) for j in range(n_id, n_id + n_bin)]
        row += [_fmt_real(cols[j][i]) for j in range(n_id + n_bin, len(header))]
        writer.writerow(row)
    text = buf.getvalue()
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def emit(units: Iterable[UnitData], target: PathOrBuffer) -> None:
    """Write units in the canonical long CSV format; ``ingest`` reads it back exactly."""
    write_frame(units_to_frame(units), target)


def incidence_cohort(unit: UnitData) -> list[IndividualRecord]:
    """Participants measured and outcome-free at baseline (d0=1, y0=0)."""
    recs = unit.records
    return [r for r, keep in zip(recs, unit.cohort_mask()) if keep]
