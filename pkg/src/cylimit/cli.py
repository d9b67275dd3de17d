"""Command line entry point: configuration, pipeline orchestration, artifact export."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cylimit.chambers import (
    DEFAULT_DELTA_WALL,
    EmptyChamber,
    classify,
    independence_check,
    label_agreement,
    wall_fraction,
    wall_location_1d,
)
from cylimit.geometry import ConfigError, ProblemConfig, barycentric_grid, dual_grid, simplex_cells
from cylimit.measures import C1_closed_form, C1_quadrature, source_measure, target_measure
from cylimit.oracle import M1ClosedForm, m1_u_antiderivative, pushforward_histogram, symmetry_check
from cylimit.potential import (
    PotentialError,
    fs_error_table,
    idempotence_error,
    ma_density_fd,
    lipschitz_u,
    lipschitz_u_star,
    ma_density_ratio,
    potential_from_duals,
)
from cylimit.transport import (
    TransportError,
    brenier_map,
    cyclical_monotonicity_check,
    default_eps_schedule,
    solve_entropic,
    solve_exact,
)

log = logging.getLogger("cylimit")

REPORT_VERSION = "1.0"
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_STRICT = 0, 2, 3, 4

_PROBLEM_KEYS = {"n", "m", "d", "degrees"}
_RUN_KEYS = {
    "N",
    "dual_N",
    "solver",
    "entropic",
    "output_dir",
    "reports",
    "delta_wall",
    "histogram_bins",
    "interior_margin",
    "thresholds",
    "monotonicity_trials",
}
_REPORT_KEYS = {"oracle", "chambers", "fs_ks", "mu_checks", "symmetry"}
_ENTROPIC_KEYS = {"eps_schedule", "tol", "inner_tol", "max_iter"}

# Limits checked under --strict.  Keys name report fields; None skips the check.
DEFAULT_THRESHOLDS = {
    "c1_rel_error": 1e-6,
    "oracle_sup_error": {"exact": 0.03, "entropic": 0.05},
    "wall_error": None,  # one simplex grid cell, filled in at run time
    "pushforward_tv": {"m1": 0.05, "other": 0.08},
    "mu_total_rel_error": {"m1": 0.02, "other": None},
    "mu_interior_mean_error": {"m1": 0.05, "other": None},
    "idempotence_error": {"m1": 5e-3, "other": 2e-2},
    "symmetry_discrepancy": 2e-2,
}


def _fail(msg: str, key: str):
    raise ConfigError(f"field {key!r}: {msg}", key)


def _int_field(data: dict, key: str, default=None, minimum: int = 2) -> int:
    val = data.get(key, default)
    if isinstance(val, bool) or not isinstance(val, int):
        _fail(f"must be an integer, got {val!r}", key)
    if val < minimum:
        _fail(f"must be >= {minimum}, got {val}", key)
    return val


def _float_field(data: dict, key: str, default: float, positive: bool = True) -> float:
    val = data.get(key, default)
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        _fail(f"must be a finite number, got {val!r}", key)
    if positive and val <= 0:
        _fail(f"must be positive, got {val}", key)
    return float(val)


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemConfig
    N: int
    dual_N: int
    solver: str = "exact"
    eps_schedule: tuple = ()
    tol: float = 1e-8
    inner_tol: float = 1e-6
    max_iter: int = 10_000
    output_dir: Path = Path("out")
    oracle: bool = True
    chambers: bool = True
    fs_ks: tuple = (4, 8, 16, 32)
    mu_checks: bool = True
    symmetry: bool = True
    delta_wall: float = DEFAULT_DELTA_WALL
    histogram_bins: int = 10
    interior_margin: float = 0.02
    monotonicity_trials: int = 10_000
    thresholds: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(data) - _PROBLEM_KEYS - _RUN_KEYS)
        if unknown:
            _fail("unknown field", unknown[0])
        problem = ProblemConfig.from_dict(data)
        N = _int_field(data, "N")
        dual_N = _int_field(data, "dual_N", N)
        solver = data.get("solver", "exact")
        if solver not in ("exact", "entropic"):
            _fail(f"must be 'exact' or 'entropic', got {solver!r}", "solver")

        ent = data.get("entropic", {})
        if not isinstance(ent, dict):
            _fail("must be an object", "entropic")
        bad = sorted(set(ent) - _ENTROPIC_KEYS)
        if bad:
            _fail("unknown field", f"entropic.{bad[0]}")
        sched = ent.get("eps_schedule", default_eps_schedule())
        if isinstance(sched, dict):
            try:
                sched = default_eps_schedule(**sched)
            except TypeError as exc:
                _fail(str(exc), "entropic.eps_schedule")
        if (
            not isinstance(sched, list)
            or not sched
            or any(isinstance(e, bool) or not isinstance(e, (int, float)) or not e > 0 for e in sched)
        ):
            _fail("must be a nonempty list of positive numbers", "entropic.eps_schedule")
        if any(e2 >= e1 for e1, e2 in zip(sched, sched[1:])):
            _fail("must be strictly decreasing", "entropic.eps_schedule")
        try:
            tol = _float_field(ent, "tol", 1e-8)
            inner_tol = _float_field(ent, "inner_tol", 1e-6)
            max_iter = _int_field(ent, "max_iter", 10_000, minimum=1)
        except ConfigError as exc:
            raise ConfigError(str(exc).replace("field '", "field 'entropic."), f"entropic.{exc.field}") from None

        reports = data.get("reports", {})
        if not isinstance(reports, dict):
            _fail("must be an object", "reports")
        bad = sorted(set(reports) - _REPORT_KEYS)
        if bad:
            _fail("unknown field", f"reports.{bad[0]}")
        for key in ("oracle", "chambers", "mu_checks", "symmetry"):
            if not isinstance(reports.get(key, True), bool):
                _fail("must be true or false", f"reports.{key}")
        ks = reports.get("fs_ks", [4, 8, 16, 32])
        if not isinstance(ks, list) or any(isinstance(k, bool) or not isinstance(k, int) or k < 1 for k in ks):
            _fail("must be a list of positive integers", "reports.fs_ks")

        out = data.get("output_dir", "out")
        if not isinstance(out, str) or not out:
            _fail("must be a nonempty path string", "output_dir")
        out_path = Path(out)
        if not out_path.is_absolute() and base_dir is not None:
            out_path = base_dir / out_path
        thresholds = data.get("thresholds", {})
        if not isinstance(thresholds, dict):
            _fail("must be an object", "thresholds")
        unknown_t = sorted(set(thresholds) - set(DEFAULT_THRESHOLDS))
        if unknown_t:
            _fail("unknown threshold", f"thresholds.{unknown_t[0]}")
        for key, val in thresholds.items():
            if val is not None and (isinstance(val, bool) or not isinstance(val, (int, float)) or val < 0):
                _fail("must be a nonnegative number or null", f"thresholds.{key}")

        return cls(
            problem=problem,
            N=N,
            dual_N=dual_N,
            solver=solver,
            eps_schedule=tuple(float(e) for e in sched),
            tol=tol,
            inner_tol=inner_tol,
            max_iter=max_iter,
            output_dir=out_path,
            oracle=reports.get("oracle", True),
            chambers=reports.get("chambers", True),
            fs_ks=tuple(ks),
            mu_checks=reports.get("mu_checks", True),
            symmetry=reports.get("symmetry", True),
            delta_wall=_float_field(data, "delta_wall", DEFAULT_DELTA_WALL),
            histogram_bins=_int_field(data, "histogram_bins", 10, minimum=1),
            interior_margin=_float_field(data, "interior_margin", 0.02, positive=False),
            monotonicity_trials=_int_field(data, "monotonicity_trials", 10_000, minimum=0),
            thresholds=thresholds,
        )

    def to_dict(self) -> dict:
        return {
            **self.problem.to_dict(),
            "N": self.N,
            "dual_N": self.dual_N,
            "solver": self.solver,
            "entropic": {
                "eps_schedule": list(self.eps_schedule),
                "tol": self.tol,
                "inner_tol": self.inner_tol,
                "max_iter": self.max_iter,
            },
            "output_dir": str(self.output_dir),
            "reports": {
                "oracle": self.oracle,
                "chambers": self.chambers,
                "fs_ks": list(self.fs_ks),
                "mu_checks": self.mu_checks,
                "symmetry": self.symmetry,
            },
            "delta_wall": self.delta_wall,
            "histogram_bins": self.histogram_bins,
            "interior_margin": self.interior_margin,
            "monotonicity_trials": self.monotonicity_trials,
            "thresholds": self.thresholds,
        }


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", "config") from None
    return RunConfig.from_dict(data, base_dir=path.parent)


# -------------------------------------------------------------------- checks


def _c1_block(cfg: ProblemConfig) -> dict:
    closed = C1_closed_form(cfg)
    quad = C1_quadrature(cfg, 4)
    return {"closed_form": closed, "quadrature": quad, "rel_error": abs(quad - closed) / closed}


def validate_report(rc: RunConfig) -> dict:
    """Cheap checks only: C1, grid sizes and measure masses."""
    cfg = rc.problem
    grid = barycentric_grid(cfg.m, rc.N)
    dual = dual_grid(cfg, rc.dual_N)
    mu = source_measure(grid)
    nu = target_measure(dual, cfg)
    return {
        "schema_version": REPORT_VERSION,
        "config": rc.to_dict(),
        "c1": _c1_block(cfg),
        "grid": {"simplex_points": len(grid), "dual_points": len(dual), "dual_spacing": dual.spacing},
        "masses": {"source": mu.total_mass, "target": nu.total_mass},
    }


def _threshold(rc: RunConfig, key: str, value):
    if key in rc.thresholds:
        return rc.thresholds[key]
    default = DEFAULT_THRESHOLDS[key]
    if key == "wall_error":
        return value
    if isinstance(default, dict):
        if rc.solver in default:
            return default[rc.solver]
        return default["m1"] if rc.problem.m == 1 else default["other"]
    return default


def _breaches(rc: RunConfig, report: dict) -> list[dict]:
    out = []
    checks = {
        "c1_rel_error": report["c1"]["rel_error"],
        "oracle_sup_error": report.get("oracle_sup_error"),
        "wall_error": report.get("wall_error"),
        "pushforward_tv": report.get("pushforward_tv"),
        "mu_total_rel_error": report.get("mu_total_rel_error"),
        "mu_interior_mean_error": report.get("mu_interior_mean_error"),
        "idempotence_error": report.get("idempotence_error"),
        "symmetry_discrepancy": report.get("symmetry_discrepancy"),
    }
    for key, val in checks.items():
        if val is None:
            continue
        limit = _threshold(rc, key, 1.0 / rc.N)
        if limit is None:
            continue
        if not val <= limit:
            out.append({"field": key, "value": val, "limit": limit})
    return out


def _fs_block(pot, ks, L_star: float, slack: float) -> dict:
    table = fs_error_table(pot, ks)
    for row in table:
        row["lower_bound"] = -L_star / row["k"] - slack
        row["sandwich_ok"] = bool(row["min"] >= row["lower_bound"] and row["max"] <= slack)
    errs = [row["sup_error"] for row in table]
    ratios = [a / b if b > 0 else math.inf for a, b in zip(errs, errs[1:])]
    return {"table": table, "ratios": ratios, "L_star": L_star, "slack": slack}


def _interior_cells(x: np.ndarray, m: int, N: int, margin: float) -> np.ndarray:
    cells = simplex_cells(m, N)
    corners = x[cells]
    return np.all(corners >= margin - 1e-12, axis=(1, 2))


def run_pipeline(rc: RunConfig, seed: int = 0, emit_plan: bool = False, write: bool = True) -> dict:
    """Solve the transport problem and write every artifact; returns the report dictionary."""
    cfg = rc.problem
    timing = {}
    t0 = time.perf_counter()
    report = validate_report(rc)
    grid = barycentric_grid(cfg.m, rc.N)
    mu = source_measure(grid)
    dual = dual_grid(cfg, rc.dual_N)
    nu = target_measure(dual, cfg)
    timing["setup"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if rc.solver == "exact":
        plan = solve_exact(mu, nu)
    else:
        plan = solve_entropic(
            mu, nu, eps_schedule=list(rc.eps_schedule), tol=rc.tol, inner_tol=rc.inner_tol, max_iter=rc.max_iter
        )
    timing["solve"] = time.perf_counter() - t0
    report["solver"] = json.loads(plan.report.to_json())
    report["solver"].pop("elapsed", None)
    report["achieved_cost"] = plan.achieved_cost
    report["duality_gap"] = plan.duality_gap
    report["cyclical_monotonicity"] = {
        "trials": rc.monotonicity_trials,
        "seed": seed,
        "min_violation": cyclical_monotonicity_check(plan, rc.monotonicity_trials, seed),
    }

    t0 = time.perf_counter()
    bmap = brenier_map(plan)
    pot = potential_from_duals(plan)
    report["idempotence_error"] = idempotence_error(pot)
    report["idempotence_error_convexified"] = idempotence_error(pot, use_raw=False)
    hist = pushforward_histogram(bmap, mu, rc.histogram_bins, cfg, nu)
    report["pushforward_tv"] = hist.tv
    report["pushforward_bins"] = rc.histogram_bins
    L_u = lipschitz_u(pot)
    L_star = lipschitz_u_star(pot)
    report["lipschitz"] = {"u": L_u, "u_star": L_star}
    if rc.fs_ks:
        # twice the change of u across one simplex grid step
        slack = 2.0 * L_u / rc.N
        report["fs"] = _fs_block(pot, rc.fs_ks, L_star, slack)
    timing["potential"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if rc.mu_checks:
        ratio = ma_density_ratio(pot, bmap, cfg)
        interior = _interior_cells(grid, cfg.m, rc.N, rc.interior_margin)
        report["mu_total_ratio"] = float(ratio.mean())
        report["mu_total_rel_error"] = abs(float(ratio.mean()) - 1.0)
        report["mu_interior_mean_error"] = float(np.mean(np.abs(ratio[interior] - 1.0)))
        report["mu_interior_cells"] = int(interior.sum())
        if cfg.m == 1:
            xc, dens = ma_density_fd(pot)
            xs = cfg.degrees[1] / sum(cfg.degrees)
            keep = (xc > 0.05) & (xc < 0.95) & (np.abs(xc - xs) > 0.05)
            report["ma_density_fd_max_error"] = float(np.max(np.abs(dens[keep] - 1.0)))
    timing["mu"] = time.perf_counter() - t0

    labels = None
    if rc.chambers:
        cmap = classify(grid, bmap, rc.delta_wall, cfg)
        labels = cmap.label_names()
        report["chambers"] = {
            "delta_wall": rc.delta_wall,
            "counts": {str(k): int(np.sum(cmap.labels == k)) for k in range(cfg.m + 1)},
            "wall_fraction": wall_fraction(cmap),
            "unresolved_fraction": cmap.unresolved_fraction,
            "wall_cells": int(len(cmap.wall_cells)),
        }
        probes = [0.05, -0.05]
        indep = {}
        for k in range(cfg.m + 1):
            try:
                indep[str(k)] = independence_check(pot, cmap, k, probes, margin=0.1)
            except EmptyChamber:
                indep[str(k)] = None
        report["independence"] = {
            "probes": probes,
            "margin": 0.1,
            "deviation": indep,
            "dual_grid_slack": max(abs(s) for s in probes) * dual.spacing,
        }
        if cfg.m == 1:
            try:
                report["wall_location"] = wall_location_1d(cmap, bmap)
            except EmptyChamber:
                report["wall_location"] = None

    if cfg.m == 1 and rc.oracle:
        oracle = M1ClosedForm(cfg)
        x0 = grid[:, 0]
        slope = -bmap.reduced[:, 0]
        inside = (x0 >= rc.interior_margin) & (x0 <= 1 - rc.interior_margin) & np.isfinite(slope)
        report["oracle_sup_error"] = float(np.max(np.abs(slope[inside] - oracle.uprime(x0[inside]))))
        report["oracle_u_sup_error"] = float(np.max(np.abs(pot.u - m1_u_antiderivative(x0, cfg))))
        report["x_star"] = oracle.x_star
        if report.get("wall_location") is not None:
            report["wall_error"] = abs(report["wall_location"] - oracle.x_star)

    if rc.symmetry:
        perms = [
            s for s in itertools.permutations(range(cfg.m + 1))
            if all(cfg.degrees[j] == cfg.degrees[i] for i, j in enumerate(s))
        ]
        if len(perms) > 1:
            per = {",".join(map(str, s)): symmetry_check(pot, s, cfg) for s in perms}
            report["symmetry"] = per
            report["symmetry_discrepancy"] = max(per.values())
            if rc.chambers:
                agree = {",".join(map(str, s)): label_agreement(cmap, s) for s in perms}
                report["label_agreement"] = agree
                report["label_agreement_min"] = min(agree.values())

    report["breaches"] = _breaches(rc, report)
    report["timing"] = timing

    if write:
        out = rc.output_dir
        out.mkdir(parents=True, exist_ok=True)
        pot.to_csv(out / "potential.csv", bmap, labels)
        pot.dual_to_csv(out / "dual.csv")
        _map_csv(out / "map.csv", grid, bmap, mu.weights)
        if rc.chambers:
            cmap.to_csv(out / "chambers.csv")
            cmap.wall_cells_to_csv(out / "wall_cells.csv")
        if emit_plan:
            plan.to_csv(out / "plan.csv")
        with open(out / "report.json", "w") as fh:
            json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report


def _map_csv(path: Path, grid: np.ndarray, bmap, weights: np.ndarray) -> None:
    m = grid.shape[1] - 1
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(m + 1)] + [f"T{i}" for i in range(m + 1)] + ["mass"])
        for x, p, w in zip(grid, bmap.p, weights):
            writer.writerow([f"{v:.17g}" for v in x] + [f"{v:.17g}" for v in p] + [f"{w:.17g}"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ----------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cylimit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "solve and export artifacts"), ("validate", "cheap checks only")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config_path", nargs="?", help="JSON config (same as --config)")
        p.add_argument("--config", dest="config_flag")
        p.add_argument("--strict", action="store_true", help="exit 4 when a check exceeds its threshold")
        p.add_argument("--output", help="override output_dir")
        if name == "run":
            p.add_argument("--emit-plan", action="store_true", help="also write plan.csv")
            p.add_argument("--seed", type=int, default=0, help="seed for Monte Carlo spot checks")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    path = args.config_flag or args.config_path
    if path is None:
        print("error: no config given (use --config <path>)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rc = load_config(path)
        if args.output:
            rc = RunConfig(**{**rc.__dict__, "output_dir": Path(args.output)})
        if args.command == "run":
            _check_writable(rc.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        report = validate_report(rc)
        report["breaches"] = _breaches(rc, report)
        print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
        return EXIT_STRICT if (args.strict and report["breaches"]) else EXIT_OK

    if args.seed < 0 or args.seed >= 2**64:
        print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_pipeline(rc, seed=args.seed, emit_plan=args.emit_plan)
    except (TransportError, PotentialError, MemoryError) as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if args.strict and report["breaches"]:
        for b in report["breaches"]:
            print(f"threshold breach: {b['field']} = {b['value']:.3g} > {b['limit']:.3g}", file=sys.stderr)
        return EXIT_STRICT
    return EXIT_OK


def _check_writable(out: Path) -> None:
    probe = out
    while not probe.exists():
        probe = probe.parent
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable", "output_dir")


if __name__ == "__main__":
    sys.exit(main())
