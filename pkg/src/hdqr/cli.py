"""Command-line entry point: ``hdqr infer``, ``hdqr mc`` and ``hdqr density``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .core import Dataset
from .density import DensityConfig
from .errors import HdqrError, StageError
from .ivqr import pivotal_un, uniform_band_critical
from .mcsim import (PAPER_GRID, McDesign, run_grid, write_grid_csv, write_grid_json,
                    write_surfaces)
from .pipeline import (DOUBLE_SELECTION, ESTIMATED, FULL, HOMOSCEDASTIC, NAIVE, OPTIMAL_IV,
                       PipelineConfig, Stages)
from .wlasso import WLassoConfig

SCHEMA = "hdqr/1"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("hdqr")

DENSITY_ALIASES = {"homo": HOMOSCEDASTIC, "homoscedastic": HOMOSCEDASTIC,
                   "estimate": ESTIMATED, "estimated": ESTIMATED}

# keys accepted in a --config JSON document
CONFIG_KEYS = {
    "y", "d", "tau", "method", "density", "xi", "seed", "order", "h", "trim_floor",
    "cap_ratio", "lam_tau", "truncation_k", "engine", "loading_iters", "lambda_rule",
    "sigma", "penalize_intercept", "B_pivotal", "schema",
}


class ValidationError(Exception):
    pass


def read_csv(path):
    """Header plus numeric columns; raises ValidationError on malformed input."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path} is not UTF-8") from exc
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise ValidationError(f"{path} needs a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise ValidationError("duplicate column names in header")
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValidationError(f"line {i}: expected {len(header)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            try:
                data[i - 2, j] = float(cell)
            except ValueError:
                raise ValidationError(f"line {i}, column {header[j]!r}: not a number: {cell!r}") from None
    if not np.all(np.isfinite(data)):
        raise ValidationError("input contains non-finite values")
    return header, data


def load_dataset(path, ycol, dcol):
    header, data = read_csv(path)
    for name, flag in ((ycol, "--y"), (dcol, "--d")):
        if name is None:
            raise ValidationError(f"{flag} is required")
        if name not in header:
            raise ValidationError(f"column {name!r} not found in {path}")
    if ycol == dcol:
        raise ValidationError("--y and --d must name different columns")
    controls = [h for h in header if h not in (ycol, dcol)]
    if not controls:
        raise ValidationError("no control columns left after removing --y and --d")
    idx = {h: j for j, h in enumerate(header)}
    try:
        return Dataset(y=data[:, idx[ycol]], d=data[:, idx[dcol]],
                       x=data[:, [idx[h] for h in controls]], column_names=controls)
    except HdqrError as exc:
        raise ValidationError(str(exc)) from exc


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot load config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    return doc


def resolve_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get("HDQR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"HDQR_SEED must be an integer, got {env!r}") from None


def _merged(args, cfg, key, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return cfg.get(key, default)


def build_config(args, cfg, n):
    schema = _merged(args, cfg, "schema", SCHEMA)
    if schema != SCHEMA:
        raise ValidationError(f"unsupported schema {schema!r}; this build writes {SCHEMA!r}")
    density = _merged(args, cfg, "density", "homo")
    if density not in DENSITY_ALIASES:
        raise ValidationError(f"unknown density mode {density!r}")
    method = _merged(args, cfg, "method", DOUBLE_SELECTION)
    if method not in (OPTIMAL_IV, DOUBLE_SELECTION, NAIVE, FULL):
        raise ValidationError(f"unknown method {method!r}")
    h = _merged(args, cfg, "h", "auto")
    try:
        dens = DensityConfig(
            order=int(_merged(args, cfg, "order", 1)),
            h=None if h in (None, "auto") else float(h),
            trim_floor=float(cfg.get("trim_floor", 1e-4)),
            cap_ratio=_cap(_merged(args, cfg, "cap_ratio", 3.0)),
        )
        wl = WLassoConfig(loading_iters=int(cfg.get("loading_iters", 2)),
                          lambda_rule=cfg.get("lambda_rule", "standard"))
        sigma = cfg.get("sigma")
        config = PipelineConfig(
            tau=float(_merged(args, cfg, "tau", 0.5)),
            method=method,
            density=DENSITY_ALIASES[density],
            density_config=dens,
            penalize_intercept=bool(cfg.get("penalize_intercept", False)),
            lam_tau=cfg.get("lam_tau"),
            truncation_k=cfg.get("truncation_k"),
            engine=cfg.get("engine", "lp"),
            wlasso_config=wl,
            xi=float(_merged(args, cfg, "xi", 0.05)),
            sigma_choice=sigma,
            B_pivotal=int(cfg.get("B_pivotal", 1000)),
            seed=resolve_seed(_merged(args, cfg, "seed")),
        )
        if not 0 < config.xi < 1:
            raise ValueError("xi must lie in (0, 1)")
        dens.resolve_h(n, config.tau)
    except (ValueError, TypeError, HdqrError) as exc:
        raise ValidationError(str(exc)) from exc
    return config


def _cap(v):
    if v is None or v == "none":
        return None
    return float(v)


def _names(data, idx):
    names = data.column_names
    return [names[j] if names else f"x{j}" for j in idx]


def format_summary(report, data):
    def num(v):
        return "NA" if v is None else f"{v:.6g}"

    lines = [
        f"method        {report.method}",
        f"tau           {report.tau:g}",
        f"n, p          {report.n}, {report.p}",
        f"estimate      {report.alpha_check:.6f}",
        f"std. error    {report.se:.6f}  ({report.sigma_choice})",
        f"wald CI       [{report.ci_wald[0]:.6f}, {report.ci_wald[1]:.6f}]",
    ]
    if report.ci_inversion is None:
        lines.append("inversion CI  NA")
    else:
        lo, hi = report.ci_inversion
        tag = "" if report.inversion_is_interval else "  (hull of a disconnected set)"
        lines.append(f"inversion CI  [{lo:.6f}, {hi:.6f}]{tag}")
    lines.append(f"sigma 1/2/3   {num(report.sigma1)} / {num(report.sigma2)} / {num(report.sigma3)}")
    for stage, sup in report.supports.items():
        lines.append(f"support {stage:<14} {len(sup):>4}  {' '.join(_names(data, sup))}")
    return "\n".join(lines) + "\n"


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def cmd_infer(args) -> int:
    try:
        cfg = load_config(args.config)
        data = load_dataset(args.data, _merged(args, cfg, "y"), _merged(args, cfg, "d"))
        config = build_config(args, cfg, data.n)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    stages = Stages(data, config)
    try:
        report = stages.report(config.method)
        pivotal = None
        if config.method in (OPTIMAL_IV, DOUBLE_SELECTION):
            draws = pivotal_un(stages.vtilde, config.tau, config.B_pivotal, config.seed)
            pivotal = uniform_band_critical(draws, config.xi) if config.B_pivotal >= 100 else None
    except StageError as exc:
        print(f"numerical failure in stage {exc.stage}: {type(exc.cause).__name__}: {exc.cause}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except HdqrError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    doc = report.to_dict(include_timings=args.timings)
    doc["schema"] = SCHEMA
    doc["support_names"] = {k: _names(data, v) for k, v in report.supports.items()}
    doc["resolved"]["B_pivotal"] = config.B_pivotal
    doc["resolved"]["xi"] = config.xi
    doc["pivotal_critical"] = pivotal
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "report.json"), doc)
    summary = format_summary(report, data)
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary)
    if not args.quiet:
        sys.stdout.write(summary)
    return EXIT_OK


def parse_grid(spec):
    """``paper`` (10 x 10), a value list ``0.1,0.5`` (full product) or pairs ``0.1:0.2,0.5:0.5``
    read as ``r2_d:r2_y``."""
    if spec == "paper":
        return [(a, b) for a in PAPER_GRID for b in PAPER_GRID]
    items = [s.strip() for s in spec.split(",") if s.strip()]
    if not items:
        raise ValidationError("empty grid")
    try:
        if all(":" in s for s in items):
            return [tuple(float(v) for v in s.split(":")) for s in items]
        if any(":" in s for s in items):
            raise ValidationError("grid mixes pairs and single values")
        vals = [float(s) for s in items]
    except ValueError:
        raise ValidationError(f"cannot parse grid {spec!r}") from None
    return [(a, b) for a in vals for b in vals]


def cmd_mc(args) -> int:
    try:
        points = parse_grid(args.grid)
        seed = resolve_seed(args.seed)
        designs = [McDesign(n=args.n, p=args.p, mu=args.mu, r2_d=rd, r2_y=ry, reps=args.reps,
                            base_seed=seed, tau=args.tau) for rd, ry in points]
        if args.jobs < 1:
            raise ValidationError("--jobs must be positive")
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    results = run_grid(designs, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    write_grid_csv(results, os.path.join(args.out, "grid.csv"))
    write_grid_json(results, os.path.join(args.out, "grid.json"))
    write_surfaces(results, args.out)
    bad = [r for r in results if r.cell_failed]
    for r in bad:
        print(f"cell r2_d={r.design.r2_d} r2_y={r.design.r2_y}: {r.failures} of {r.design.reps} "
              "replications failed", file=sys.stderr)
    return EXIT_NUMERIC if bad else EXIT_OK


def cmd_density(args) -> int:
    try:
        data = load_dataset(args.data, args.y, args.d)
        config = build_config(args, {}, data.n)
        config = replace(config, density=ESTIMATED)
        h = config.density_config.resolve_h(data.n, config.tau)
    except (ValidationError, HdqrError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    stages = Stages(data, config)
    try:
        f, summary = stages.density
    except StageError as exc:
        print(f"numerical failure in stage {exc.stage}: {type(exc.cause).__name__}: {exc.cause}",
              file=sys.stderr)
        return EXIT_NUMERIC
    trimmed = stages.density_estimate.trimmed
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "fhat.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "fhat", "trimmed"])
        for i, (fi, ti) in enumerate(zip(f, trimmed)):
            w.writerow([i, repr(float(fi)), int(ti)])
    summary = dict(summary, order=config.density_config.order, tau=config.tau, n=data.n,
                   h_rule="auto" if config.density_config.h is None else "fixed")
    _write_json(os.path.join(args.out, "density_summary.json"), summary)
    print(f"bandwidth h = {h:.10g} ({summary['h_rule']})")
    print(f"fhat min/mean/max = {summary['min']:.6g} / {summary['mean']:.6g} / {summary['max']:.6g}; "
          f"trimmed {summary['trimmed']}")
    return EXIT_OK


def _data_flags(p):
    p.add_argument("--data", required=True, help="Input CSV with a header row.")
    p.add_argument("--y", help="Outcome column.")
    p.add_argument("--d", help="Treatment column; all other columns are controls.")
    p.add_argument("--tau", type=float, help="Quantile index (default 0.5).")
    p.add_argument("--out", default=".", help="Output directory.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdqr", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="Inference on the treatment coefficient.")
    _data_flags(p)
    p.add_argument("--method", choices=[OPTIMAL_IV, DOUBLE_SELECTION, NAIVE, FULL])
    p.add_argument("--density", choices=sorted(DENSITY_ALIASES))
    p.add_argument("--order", type=int, choices=[1, 2])
    p.add_argument("--h", help="Bandwidth or 'auto'.")
    p.add_argument("--xi", type=float, help="1 - confidence level (default 0.05).")
    p.add_argument("--seed", type=int, help="Seed (falls back to HDQR_SEED, then 0).")
    p.add_argument("--config", help="JSON file with run settings; flags take precedence.")
    p.add_argument("--schema", help=f"Report schema to write; only {SCHEMA!r} is supported.")
    p.add_argument("--timings", action="store_true", help="Include stage timings in report.json.")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("mc", help="Monte Carlo rejection-frequency grid.")
    p.add_argument("--grid", default="paper",
                   help="'paper' (10 x 10), values '0.1,0.5' or r2_d:r2_y pairs '0.5:0.5,0.8:0.8'.")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--mu", type=int, choices=[0, 1], default=0)
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--p", type=int, default=300)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("density", help="Conditional density weights at tau.")
    _data_flags(p)
    p.add_argument("--h", default="auto", help="Bandwidth or 'auto'.")
    p.add_argument("--order", type=int, choices=[1, 2], default=1)
    p.add_argument("--cap-ratio", dest="cap_ratio", default="3",
                   help="Cap fhat at this multiple of its median, or 'none'.")
    p.set_defaults(func=cmd_density)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
