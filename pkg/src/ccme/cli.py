"""Command-line interface.

Commands: simulate, fit, density, sweep, report.  Configuration flows from
defaults, then an optional JSON --config file, then flags.  Status text goes
to stderr; stdout carries data only.  All file outputs are written to a temp
file and renamed into place.

Exit codes: 0 success, 2 I/O failure, 3 parse failure (flags, config files,
CSV inputs, dimension mismatches), 4 degenerate data or configuration,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import zipfile
from dataclasses import fields

import numpy as np

from .config import (RunConfig, config_json, load_config_file, merge_config,
                     parse_override, to_hyper, validate_config)
from .data import dataset_to_csv, load_dataset, split_data
from .density import curves_to_csv, default_grid, density_curves
from .errors import (ConfigError, DegenerateDataError, InvalidArgumentError,
                     NumericError)
from .estimators import fit_ccme
from .propensity import fit_forest, fit_logistic, make_oracle
from .serialize import load_model, save_model
from .synthbench import (N_COV, DgpConfig, generate, loglog_slope,
                         normalize_scenario, plan_cells, run_sweep,
                         scenario_hyper, scenario_propensity)

__all__ = ["main"]

_SWEEP_COLUMNS = ["method", "variant", "scenario", "n", "seed",
                  "mse", "seconds", "error"]


class _Parser(argparse.ArgumentParser):
    """argparse that reports flag problems as parse errors instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise InvalidArgumentError(message)


def atomic_write(path: str, text: str) -> None:
    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _status(msg: str) -> None:
    print(msg, file=sys.stderr)


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="JSON file of config fields")
    common.add_argument("--print-config", action="store_true",
                        help="print the resolved config as JSON and exit")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        common.add_argument(flag, dest=f"cfg_{f.name}", metavar="V",
                            help=argparse.SUPPRESS)

    parser = _Parser(prog="ccme", parents=[common], allow_abbrev=False,
                     description=(
        "Doubly robust conditional density estimation for treated outcomes: "
        "simulate benchmark data, fit two-stage models, evaluate densities, "
        "and sweep convergence grids."))
    sub = parser.add_subparsers(dest="command", metavar="command")

    sim = sub.add_parser("simulate", parents=[common], allow_abbrev=False,
                         help="draw a benchmark dataset to CSV")
    sim.add_argument("--out", default="sim.csv", help="output CSV path")

    fit = sub.add_parser("fit", parents=[common], allow_abbrev=False,
                         help="fit a two-stage model on a dataset CSV")
    fit.add_argument("data", help="dataset CSV (x1..xd,a,y)")
    fit.add_argument("--model-out", default="model.npz",
                     help="where to write the fitted model archive")

    den = sub.add_parser("density", parents=[common], allow_abbrev=False,
                         help="evaluate conditional densities from a model")
    den.add_argument("model", help="model archive written by fit")
    den.add_argument("--v", help="one query point, comma-separated")
    den.add_argument("--v-file", help="CSV of query points, one per row")
    den.add_argument("--grid-lo", type=float, help="outcome grid lower bound")
    den.add_argument("--grid-hi", type=float, help="outcome grid upper bound")
    den.add_argument("--out", default="density.csv",
                     help="output CSV path (v_id,y,density)")

    sw = sub.add_parser("sweep", parents=[common], allow_abbrev=False,
                        help="run a (method, variant, scenario, n, seed) grid")
    sw.add_argument("--out", default="sweep.csv", help="results CSV path")
    sw.add_argument("--filter", action="append", default=[], metavar="K=V",
                    help="keep only matching cells, e.g. method=rr or n=200,500")

    rep = sub.add_parser("report", parents=[common], allow_abbrev=False,
                         help="summarize a sweep CSV: medians and slopes")
    rep.add_argument("results", help="sweep CSV written by the sweep command")
    rep.add_argument("--out", help="optional medians CSV path")
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = parse_override(f.name, raw)
    file_vals = load_config_file(args.config) if args.config else None
    cfg = merge_config(file_vals, overrides)
    if "threads" not in overrides and os.environ.get("CCME_THREADS"):
        try:
            cfg.threads = int(os.environ["CCME_THREADS"])
        except ValueError as exc:
            raise InvalidArgumentError(f"CCME_THREADS must be an integer: {exc}")
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, args: argparse.Namespace) -> int:
    data, _ = generate(DgpConfig(cfg.n, cfg.seed, cfg.scenario))
    atomic_write(args.out, dataset_to_csv(data))
    meta = {"command": "simulate", "n": cfg.n, "seed": cfg.seed,
            "scenario": cfg.scenario}
    atomic_write(args.out + ".meta.json",
                 json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _status(f"wrote {cfg.n} rows to {args.out} (+ .meta.json)")
    return 0


def _benchmark_shaped(d_x: int) -> bool:
    return d_x == N_COV


def cmd_fit(cfg: RunConfig, args: argparse.Namespace) -> int:
    with open(args.data, "r", encoding="utf-8") as fh:
        data = load_dataset(fh.read())
    d_x = data.X.shape[1]
    split = split_data(data, cfg.seed, cfg.v_cols)
    hyper = to_hyper(cfg)
    if _benchmark_shaped(d_x):
        hyper = scenario_hyper(cfg.scenario, hyper)
    elif cfg.scenario != "a":
        raise ConfigError(
            f"scenario {cfg.scenario!r} wiring needs the {N_COV}-covariate "
            f"benchmark layout; this dataset has {d_x} covariates")

    prop = None
    if cfg.variant != "onestep":
        clip = (cfg.clip_lo, cfg.clip_hi)
        if cfg.propensity == "auto":
            if _benchmark_shaped(d_x):
                prop = scenario_propensity(cfg.scenario, split.d0.X,
                                           split.d0.A, cfg.seed)
            else:
                prop = fit_forest(split.d0.X, split.d0.A, seed=cfg.seed, clip=clip)
        elif cfg.propensity == "forest":
            prop = fit_forest(split.d0.X, split.d0.A, seed=cfg.seed, clip=clip)
        elif cfg.propensity == "logistic":
            prop = fit_logistic(split.d0.X, split.d0.A, clip=clip)
        else:
            if not _benchmark_shaped(d_x):
                raise ConfigError("the oracle propensity is defined for the "
                                  f"{N_COV}-covariate benchmark layout only")
            prop = make_oracle("synth-pi", d_x, clip)

    model = fit_ccme(split, cfg.method, cfg.variant, prop, hyper)
    save_model(model, args.model_out)
    _status(f"fitted {cfg.method}/{cfg.variant} on {len(data)} rows "
            f"({split.m} treated nuisance rows, {split.n} regression rows); "
            f"model -> {args.model_out}")
    return 0


def _parse_v_args(args: argparse.Namespace) -> np.ndarray:
    if (args.v is None) == (args.v_file is None):
        raise InvalidArgumentError("density needs exactly one of --v or --v-file")
    if args.v is not None:
        try:
            point = [float(tok) for tok in args.v.split(",") if tok.strip()]
        except ValueError as exc:
            raise InvalidArgumentError(f"--v wants comma-separated floats: {exc}")
        if not point:
            raise InvalidArgumentError("--v is empty")
        return np.asarray(point, dtype=np.float64).reshape(1, -1)
    with open(args.v_file, "r", encoding="utf-8") as fh:
        text = fh.read()
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if rows and any(ch.isalpha() for ch in rows[0]):
        rows = rows[1:]                  # tolerate a header line
    try:
        vq = np.loadtxt(io.StringIO("\n".join(rows)), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise InvalidArgumentError(f"malformed query file {args.v_file}: {exc}")
    if vq.size == 0:
        raise InvalidArgumentError(f"query file {args.v_file} has no rows")
    return vq


def cmd_density(cfg: RunConfig, args: argparse.Namespace) -> int:
    try:
        model = load_model(args.model)
    except (zipfile.BadZipFile, ValueError, KeyError) as exc:
        if isinstance(exc, InvalidArgumentError):
            raise
        raise InvalidArgumentError(f"cannot read model {args.model}: {exc}")
    vq = _parse_v_args(args)
    if (args.grid_lo is None) != (args.grid_hi is None):
        raise InvalidArgumentError("--grid-lo and --grid-hi come together")
    if args.grid_lo is not None:
        if not args.grid_lo < args.grid_hi:
            raise InvalidArgumentError("--grid-lo must be below --grid-hi")
        grid = np.linspace(args.grid_lo, args.grid_hi, cfg.grid_points)
    else:
        grid = default_grid(model, cfg.grid_points, cfg.grid_pad)
    curves = density_curves(model, vq, grid)
    atomic_write(args.out, curves_to_csv(curves))
    masses = ", ".join(f"{c.mass:.4f}" for c in curves[:8])
    more = "..." if len(curves) > 8 else ""
    _status(f"wrote {len(curves)} density curves ({len(grid)} grid points) "
            f"to {args.out}; masses: {masses}{more}")
    return 0


def _apply_filters(cells: list, filters: list[str]) -> list:
    for spec in filters:
        if "=" not in spec:
            raise InvalidArgumentError(f"--filter wants key=value, got {spec!r}")
        key, _, value = spec.partition("=")
        key = key.strip().lower()
        tokens = [tok.strip() for tok in value.split(",") if tok.strip()]
        if not tokens:
            raise InvalidArgumentError(f"--filter {spec!r} has no values")
        if key in ("n", "seed"):
            try:
                allowed = {int(tok) for tok in tokens}
            except ValueError as exc:
                raise InvalidArgumentError(f"--filter {key} wants ints: {exc}")
            cells = [c for c in cells if getattr(c, key) in allowed]
        elif key in ("method", "variant"):
            allowed = {tok.lower() for tok in tokens}
            cells = [c for c in cells if getattr(c, key) in allowed]
        elif key == "scenario":
            allowed = {normalize_scenario(tok) for tok in tokens}
            cells = [c for c in cells if c.scenario in allowed]
        else:
            raise InvalidArgumentError(f"unknown --filter key {key!r}")
    return cells


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    cells = plan_cells(cfg.methods, cfg.variants, cfg.scenarios,
                       cfg.n_list, cfg.seeds)
    cells = _apply_filters(cells, args.filter)
    if not cells:
        raise ConfigError("no sweep cells left after filtering")
    _status(f"running {len(cells)} cells "
            f"({cfg.test_points} eval points, {cfg.grid_points} grid points, "
            f"threads={cfg.threads})")

    def progress(rec) -> None:
        tag = f"mse={rec.mse:.6g}" if rec.error == "" else f"FAILED {rec.error}"
        _status(f"  {rec.method}/{rec.variant}/{rec.scenario} n={rec.n} "
                f"seed={rec.seed}: {tag} ({rec.seconds:.1f}s)")

    records = run_sweep(cells, to_hyper(cfg), cfg.test_points, cfg.grid_points,
                        cfg.eval_seed, cfg.threads, progress)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_SWEEP_COLUMNS)
    for r in records:
        writer.writerow([r.method, r.variant, r.scenario, r.n, r.seed,
                         f"{r.mse:.17g}", f"{r.seconds:.3f}", r.error])
    atomic_write(args.out, buf.getvalue())
    ok = sum(1 for r in records if r.error == "" and np.isfinite(r.mse))
    _status(f"{ok}/{len(records)} cells succeeded; results -> {args.out}")
    return 0 if ok >= 1 else 5


def _read_sweep_csv(path: str) -> tuple[list[dict], int]:
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                [c.strip() for c in reader.fieldnames] != _SWEEP_COLUMNS:
            raise InvalidArgumentError(
                f"{path} lacks the sweep header {','.join(_SWEEP_COLUMNS)}")
        rows, skipped = [], 0
        for lineno, raw in enumerate(reader, start=2):
            if any(raw[c] is None for c in _SWEEP_COLUMNS):
                raise InvalidArgumentError(f"{path}:{lineno}: wrong field count")
            try:
                row = {"method": raw["method"], "variant": raw["variant"],
                       "scenario": raw["scenario"], "n": int(raw["n"]),
                       "seed": int(raw["seed"]), "mse": float(raw["mse"]),
                       "error": raw["error"]}
            except ValueError as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: {exc}")
            if row["error"] != "" or not np.isfinite(row["mse"]):
                skipped += 1
                continue
            rows.append(row)
    return rows, skipped


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    rows, skipped = _read_sweep_csv(args.results)
    if skipped:
        _status(f"excluded {skipped} failed rows")
    if not rows:
        raise DegenerateDataError("no successful rows to report")
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = (row["method"], row["variant"], row["scenario"], row["n"])
        groups.setdefault(key, []).append(row["mse"])
    medians = {key: float(np.median(vals)) for key, vals in sorted(groups.items())}

    out = io.StringIO()
    out.write(f"{'method':<8}{'variant':<9}{'scenario':<10}{'n':>7}"
              f"{'cells':>7}  {'median_mse':<12}\n")
    for (method, variant, scenario, n), med in medians.items():
        cells = len(groups[(method, variant, scenario, n)])
        out.write(f"{method:<8}{variant:<9}{scenario:<10}{n:>7}"
                  f"{cells:>7}  {med:<12.6g}\n")

    slope_keys: dict[tuple, dict[int, float]] = {}
    for (method, variant, scenario, n), med in medians.items():
        slope_keys.setdefault((method, variant, scenario), {})[n] = med
    slope_lines = []
    for key, by_n in sorted(slope_keys.items()):
        if len(by_n) < 3 or any(v <= 0 for v in by_n.values()):
            continue
        ns = np.array(sorted(by_n))
        med = np.array([by_n[n] for n in ns], dtype=np.float64)
        slope_lines.append((key, loglog_slope(ns, med)))
    if slope_lines:
        out.write("\nlog-log slope of median mse vs n:\n")
        for (method, variant, scenario), slope in slope_lines:
            out.write(f"{method:<8}{variant:<9}{scenario:<10}{slope:>8.3f}\n")
    sys.stdout.write(out.getvalue())

    if args.out:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "variant", "scenario", "n", "cells",
                         "median_mse"])
        for (method, variant, scenario, n), med in medians.items():
            writer.writerow([method, variant, scenario, n,
                             len(groups[(method, variant, scenario, n)]),
                             f"{med:.17g}"])
        atomic_write(args.out, buf.getvalue())
        _status(f"medians -> {args.out}")
    return 0


_COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "density": cmd_density,
             "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        if args.print_config:
            sys.stdout.write(config_json(cfg))
            return 0
        if args.command is None:
            raise InvalidArgumentError("a command is required "
                                       "(simulate, fit, density, sweep, report)")
        return _COMMANDS[args.command](cfg, args)
    except NumericError as exc:
        _status(f"numeric failure: {exc}")
        return 5
    except (DegenerateDataError, ConfigError) as exc:
        _status(f"degenerate data or configuration: {exc}")
        return 4
    except InvalidArgumentError as exc:
        _status(f"parse failure: {exc}")
        return 3
    except OSError as exc:
        _status(f"i/o failure: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
