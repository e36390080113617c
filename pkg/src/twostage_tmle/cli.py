"""``twostage-tmle`` command line: analyze, sensitivity, simulate, generate.

Exit codes: 0 success, 1 invalid input or configuration, 2 estimation failure.
Reports are written as sorted-key JSON plus an aligned text table; numbers in
the tables are the JSON values rounded to 4 significant digits.  Wall-clock
timing goes to stderr only, so reports are byte-identical across runs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, analysis_to_dict, load_config
from .data_model import DataValidationError, group_units, read_table, validate_frame, write_frame
from .simulator import StudyConfig, generate, replicate_study
from .stage1 import Stage1Error, estimate_endpoints
from .stage2 import Stage2Error, rows_from_estimates, sensitivity_grid, tmle_effect

EXIT_OK, EXIT_INVALID, EXIT_ESTIMATION = 0, 1, 2


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def fmt(x: Any) -> str:
    """Four significant digits; the text tables use nothing else."""
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "NA"
    return f"{float(x):.4g}"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def _load(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise _Fail(EXIT_INVALID, f"cannot read config: {exc}")
    except ConfigError as exc:
        raise _Fail(EXIT_INVALID, f"invalid config: {exc}")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _read_data(path: str, cfg: RunConfig):
    try:
        return validate_frame(read_table(path, cfg.schema_mapping))
    except FileNotFoundError as exc:
        raise _Fail(EXIT_INVALID, f"cannot read data: {exc}")
    except DataValidationError as exc:
        raise _Fail(EXIT_INVALID, f"invalid data: {exc}")


def _input_block(path: str, frame, units) -> dict:
    return {"file": os.path.basename(path), "sha256": _sha256(path), "n_records": len(frame),
            "n_units": len(units)}


def effect_line(eff) -> str:
    label = "RR" if eff.scale == "risk_ratio" else "RD"
    rule = f"t({eff.df})" if eff.df is not None else "normal"
    return (f"{label} {fmt(eff.point)} (95% CI {fmt(eff.ci_lower)}-{fmt(eff.ci_upper)}); "
            f"se {fmt(eff.se)}{' on log scale' if eff.scale == 'risk_ratio' else ''}; "
            f"{rule} multiplier {fmt(eff.multiplier)}; p {fmt(eff.p_value)}")


def analysis_report(frame, cfg, path: str, threads: int) -> tuple[dict, str]:
    a = cfg.analysis
    units = group_units(frame, a.unit_level, validated=True)
    try:
        ests = estimate_endpoints(units, a, threads=threads)
        eff = tmle_effect(rows_from_estimates(units, ests), a)
    except Stage1Error as exc:
        raise _Fail(EXIT_ESTIMATION, f"stage 1 failed: {exc}")
    except Stage2Error as exc:
        raise _Fail(EXIT_ESTIMATION, f"stage 2 failed: {exc}")
    k = len(units)
    unit_word = "N" if a.unit_level == "cluster" else "K"
    report = {
        "version": __version__,
        "seed": a.seed,
        "config": analysis_to_dict(a),
        "input": _input_block(path, frame, units),
        "unit_level": a.unit_level,
        "units_label": f"{unit_word}={k}",
        "endpoints": [dict(e.as_dict(), arm=u.arm, learners=e.learners) for u, e in zip(units, ests)],
        "effect": eff.as_dict(),
        "diagnostics": {
            "g_bound_hits": int(sum(e.g_bound_hits for e in ests)),
            "flagged_units": {e.unit_id: list(e.flags) for e in ests if e.flags},
            "selection": eff.selection,
        },
    }
    rows = [[e.unit_id, str(u.arm), str(e.n_individuals), str(e.n_measured_followup), fmt(e.psi_den_hat),
             fmt(e.psi_num_hat), fmt(e.endpoint), str(e.g_bound_hits)] for u, e in zip(units, ests)]
    text = f"Two-stage TMLE, {a.unit_level}-level analysis ({unit_word}={k}), seed {a.seed}\n\n"
    text += _table(["unit", "arm", "n", "n_followup", "psi_den", "psi_num", "endpoint", "g_bound_hits"], rows)
    text += f"\narm means: treated {fmt(eff.phi1)}, control {fmt(eff.phi0)}\n"
    text += effect_line(eff) + "\n"
    return report, text


def cmd_analyze(args) -> int:
    cfg = _load(args)
    frame = _read_data(args.data, cfg)
    report, text = analysis_report(frame, cfg, args.data, args.threads)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "report.json"), dumps(report))
    _write(os.path.join(args.out, "report.txt"), text)
    print(text, end="")
    return EXIT_OK


def sensitivity_report(frame, cfg, path: str, threads: int) -> tuple[dict, str]:
    a = cfg.analysis
    if not a.stage1_adjusted:
        raise _Fail(EXIT_INVALID, "sensitivity analysis needs a Stage 1 adjustment set in [stage1]")
    units_by_level = {lvl: group_units(frame, lvl, validated=True) for lvl in ("partition", "cluster")}
    grid = sensitivity_grid(units_by_level, a, threads=threads)
    rows_json, rows_txt = [], []
    for r in grid:
        entry = {"estimator": r.estimator, "assumptions": r.assumptions, "config": analysis_to_dict(r.config),
                 "error": r.error, "effect": r.estimate.as_dict() if r.estimate is not None else None,
                 "endpoints": {e.unit_id: e.endpoint for e in r.endpoints}}
        rows_json.append(entry)
        if r.estimate is not None:
            e = r.estimate
            cell = f"{fmt(e.point)} ({fmt(e.ci_lower)}-{fmt(e.ci_upper)})"
        else:
            cell = f"failed: {r.error}"
        rows_txt.append([r.estimator, r.assumptions, cell])
    report = {"version": __version__, "seed": a.seed, "config": analysis_to_dict(a),
              "input": _input_block(path, frame, units_by_level["partition"]), "rows": rows_json}
    label = "Point (95% CI)" if a.effect_scale == "risk_ratio" else "RD (95% CI)"
    text = _table(["Estimator", "Key assumptions", label], rows_txt)
    return report, text


def cmd_sensitivity(args) -> int:
    cfg = _load(args)
    frame = _read_data(args.data, cfg)
    report, text = sensitivity_report(frame, cfg, args.data, args.threads)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "sensitivity.json"), dumps(report))
    _write(os.path.join(args.out, "sensitivity.txt"), text)
    print(text, end="")
    if all(r["effect"] is None for r in report["rows"]):
        print("every row failed", file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


def _studies(cfg: RunConfig) -> list[StudyConfig]:
    return list(cfg.studies) if cfg.studies else [StudyConfig("analysis", cfg.analysis)]


OC_COLUMNS = ("config_id", "bias", "mc_se_bias", "emp_se", "mean_se", "coverage", "rejection",
              "mean_ci_width", "mean_estimate", "truth", "n_reps", "n_fail")


def cmd_simulate(args) -> int:
    cfg = _load(args)
    if args.dgp is not None:
        dgp_cfg = _load(argparse.Namespace(config=args.dgp, seed=args.seed))
        if dgp_cfg.dgp is None:
            raise _Fail(EXIT_INVALID, f"{args.dgp} has no [simulation.dgp] section")
        dgp = dgp_cfg.dgp
    elif cfg.dgp is not None:
        dgp = cfg.dgp
    else:
        raise _Fail(EXIT_INVALID, "no [simulation.dgp] section and no --dgp file")
    n_reps = args.reps if args.reps is not None else cfg.n_reps
    if n_reps is None or n_reps < 2:
        raise _Fail(EXIT_INVALID, "need at least 2 replicates (--reps or [simulation] n_reps)")
    studies = _studies(cfg)
    try:
        result = replicate_study(dgp, studies, n_reps, mc_reps=cfg.mc_reps, threads=args.threads)
    except ValueError as exc:
        raise _Fail(EXIT_INVALID, f"invalid simulation setup: {exc}")
    os.makedirs(args.out, exist_ok=True)
    table = result.table.loc[:, list(OC_COLUMNS)]
    table.to_csv(os.path.join(args.out, "operating_characteristics.csv"), index=False,
                 lineterminator="\n", float_format="%.10g")
    result.raw.to_csv(os.path.join(args.out, "replicates.csv"), index=False, lineterminator="\n",
                      float_format="%.10g")
    truth = {"dgp": dgp.as_dict(), "n_reps": n_reps,
             "truths": {lvl: t.as_dict() for lvl, t in sorted(result.truths.items())},
             "analyses": {s.config_id: analysis_to_dict(s.config) for s in studies}}
    _write(os.path.join(args.out, "truth.json"), dumps(truth))
    rows = [[str(r["config_id"])] + [fmt(r[c]) for c in OC_COLUMNS[1:-2]] + [str(r["n_reps"]), str(r["n_fail"])]
            for _, r in table.iterrows()]
    text = _table(list(OC_COLUMNS), rows)
    _write(os.path.join(args.out, "operating_characteristics.txt"), text)
    print(text, end="")
    print(f"{n_reps} replicates in {result.seconds:.1f} s", file=sys.stderr)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load(args)
    if cfg.dgp is None:
        raise _Fail(EXIT_INVALID, "config has no [simulation.dgp] section")
    frame = generate(cfg.dgp, replicate=args.replicate)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    write_frame(frame, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twostage-tmle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, help="long-format CSV, one row per participant")
        sp.add_argument("--config", required=True, help="TOML configuration file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--threads", type=int, default=1, help="worker processes (0 = all cores)")

    common(sub.add_parser("analyze", help="estimate the effect for one dataset"))
    common(sub.add_parser("sensitivity", help="five-configuration sensitivity grid"))
    sp = sub.add_parser("simulate", help="replication study on a simulated design")
    common(sp, data=False)
    sp.add_argument("--dgp", default=None, help="TOML file with a [simulation.dgp] section")
    sp.add_argument("--reps", type=int, default=None, help="number of replicates")
    sp = sub.add_parser("generate", help="write one simulated trial as CSV")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--replicate", type=int, default=0)
    return p


_COMMANDS = {"analyze": cmd_analyze, "sensitivity": cmd_sensitivity, "simulate": cmd_simulate,
             "generate": cmd_generate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 0:
        print("error: --threads must be >= 0", file=sys.stderr)
        return EXIT_INVALID
    start = time.perf_counter()
    try:
        code = _COMMANDS[args.command](args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    print(f"done in {time.perf_counter() - start:.2f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
