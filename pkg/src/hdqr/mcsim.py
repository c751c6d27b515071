"""Monte Carlo harness for the partially linear quantile design.

Each replication draws ``x = (1, z)`` with ``z`` Gaussian AR(1), a treatment
``d = x'(c_d nu) + v`` and an outcome ``y = alpha d + x'(c_y nu) + eps`` whose
noise variance is ``(2 - mu + mu d^2) / 2``.  ``c_d`` and ``c_y`` are set from
target population R^2 values.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Dataset
from .errors import HdqrError
from .pipeline import (DOUBLE_SELECTION, ESTIMATED, NAIVE, OPTIMAL_IV, PipelineConfig,
                       run_methods)

log = logging.getLogger(__name__)

REGIONS = ("naive_wald", "optiv_wald", "optiv_inversion", "double_wald")
PAPER_GRID = tuple(round(0.1 * i, 1) for i in range(10))
FAILURE_CAP = 0.02


@dataclass(frozen=True)
class McDesign:
    n: int = 250
    p: int = 300
    tau: float = 0.5
    alpha_true: float = 0.5
    rho: float = 0.5
    mu: int = 0
    r2_y: float = 0.0
    r2_d: float = 0.0
    reps: int = 500
    base_seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.p < 2 or self.reps < 0:
            raise ValueError("n and p must be at least 2 and reps non-negative")
        if self.mu not in (0, 1):
            raise ValueError("mu must be 0 or 1")
        for r2 in (self.r2_y, self.r2_d):
            if not 0.0 <= r2 < 1.0:
                raise ValueError("R^2 targets must lie in [0, 1)")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")


@dataclass
class McResult:
    design: McDesign
    rejection: dict
    avg_len: dict
    bias: dict
    failures: int
    successes: int
    cell_failed: bool = False
    errors: list = field(default_factory=list)

    def rows(self):
        for region in REGIONS:
            yield {
                "r2_y": self.design.r2_y,
                "r2_d": self.design.r2_d,
                "mu": self.design.mu,
                "method": region,
                "rejection": self.rejection[region],
                "avg_len": self.avg_len[region],
                "bias": self.bias[region],
                "failures": self.failures,
            }


def ar1_cov(m: int, rho: float) -> np.ndarray:
    idx = np.arange(m)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def nu_vector(p: int) -> np.ndarray:
    """``nu_j = 1 / j^2``; the first entry multiplies the intercept."""
    return 1.0 / np.arange(1, p + 1) ** 2


def calibrate_coef(r2: float, nu, sigma, noise_var: float) -> float:
    """Scale ``c`` with population ``R^2 = c^2 q / (c^2 q + noise_var)``.

    ``q = nu_z' sigma nu_z`` over the non-intercept entries, so ``nu`` has one
    more entry than ``sigma`` has rows.
    """
    if not 0.0 <= r2 < 1.0:
        raise ValueError("r2 must lie in [0, 1)")
    nu = np.asarray(nu, dtype=float)
    nz = nu[1:]
    q = float(nz @ np.asarray(sigma) @ nz)
    return math.sqrt(r2 * noise_var / ((1.0 - r2) * q))


@dataclass(frozen=True)
class DesignCoefs:
    c_d: float
    c_y: float
    nu: np.ndarray
    q: float
    ed2: float
    noise_var_y: float


def design_coefs(design: McDesign) -> DesignCoefs:
    nu = nu_vector(design.p)
    sigma = ar1_cov(design.p - 1, design.rho)
    q = float(nu[1:] @ sigma @ nu[1:])
    c_d = calibrate_coef(design.r2_d, nu, sigma, 1.0)
    # E[d^2] includes the squared mean c_d * nu_1 from the intercept
    ed2 = c_d ** 2 * (q + nu[0] ** 2) + 1.0
    noise_var_y = (2.0 - design.mu + design.mu * ed2) / 2.0
    c_y = calibrate_coef(design.r2_y, nu, sigma, noise_var_y)
    return DesignCoefs(c_d, c_y, nu, q, ed2, noise_var_y)


def replication_rng(base_seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([base_seed, rep])))


def ar1_draw(rng, n: int, m: int, rho: float) -> np.ndarray:
    e = rng.standard_normal((n, m))
    z = np.empty_like(e)
    z[:, 0] = e[:, 0]
    s = math.sqrt(1.0 - rho ** 2)
    for j in range(1, m):
        z[:, j] = rho * z[:, j - 1] + s * e[:, j]
    return z


@dataclass(frozen=True)
class Replication:
    data: Dataset
    f_true: np.ndarray
    v_true: np.ndarray


def generate_replication(design: McDesign, rep: int, coefs: Optional[DesignCoefs] = None) -> Replication:
    """One draw of the design; also returns the true density and instrument at tau = 0.5."""
    coefs = design_coefs(design) if coefs is None else coefs
    rng = replication_rng(design.base_seed, rep)
    n, p = design.n, design.p
    z = ar1_draw(rng, n, p - 1, design.rho)
    x = np.column_stack([np.ones(n), z])
    vt = rng.standard_normal(n)
    d = x @ (coefs.c_d * coefs.nu) + vt
    var = 2.0 - design.mu + design.mu * d ** 2
    eps = np.sqrt(var / 2.0) * rng.standard_normal(n)
    y = design.alpha_true * d + x @ (coefs.c_y * coefs.nu) + eps
    f = 1.0 / np.sqrt(math.pi * var)
    return Replication(Dataset(y=y, d=d, x=x), f, vt * f)


def default_config(design: McDesign, seed: int = 0) -> PipelineConfig:
    return PipelineConfig(tau=design.tau, density=ESTIMATED, seed=seed)


def _one_rep(design: McDesign, rep: int, coefs: DesignCoefs):
    """``(region -> (rejected, length, estimate))`` or an error string."""
    data = generate_replication(design, rep, coefs).data
    a0 = design.alpha_true
    try:
        reports = run_methods(data, default_config(design, rep), (NAIVE, OPTIMAL_IV, DOUBLE_SELECTION))
    except (HdqrError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        return f"rep {rep}: {type(exc).__name__}: {exc}"
    out = {}
    for region, method, kind in (("naive_wald", NAIVE, "wald"), ("optiv_wald", OPTIMAL_IV, "wald"),
                                 ("optiv_inversion", OPTIMAL_IV, "inversion"),
                                 ("double_wald", DOUBLE_SELECTION, "wald")):
        r = reports[method]
        if kind == "wald":
            lo, hi = r.ci_wald
        elif r.ci_inversion is None:
            lo, hi = math.nan, math.nan
        else:
            lo, hi = r.ci_inversion
        out[region] = (not r.covers(a0, kind), hi - lo, r.alpha_check)
    return out


def _run_chunk(args):
    from threadpoolctl import threadpool_limits

    design, reps = args
    coefs = design_coefs(design)
    with threadpool_limits(1):
        return [_one_rep(design, rep, coefs) for rep in reps]


def _aggregate(design: McDesign, outcomes) -> McResult:
    ok = [o for o in outcomes if isinstance(o, dict)]
    errs = [o for o in outcomes if isinstance(o, str)]
    rej, length, bias = {}, {}, {}
    for region in REGIONS:
        if ok:
            rej[region] = float(np.mean([o[region][0] for o in ok]))
            lens = [o[region][1] for o in ok]
            length[region] = float(np.nanmean(lens)) if not all(map(math.isnan, lens)) else math.nan
            bias[region] = float(np.mean([o[region][2] for o in ok]) - design.alpha_true)
        else:
            rej[region] = length[region] = bias[region] = math.nan
    failed = len(errs) > FAILURE_CAP * design.reps
    if failed:
        log.error("cell r2_y=%s r2_d=%s mu=%s: %d of %d replications failed",
                  design.r2_y, design.r2_d, design.mu, len(errs), design.reps)
    for e in errs:
        log.warning(e)
    return McResult(design, rej, length, bias, len(errs), len(ok), failed, errs)


def run_grid(designs: Sequence[McDesign], jobs: int = 1, chunk: int = 25) -> list:
    """Run every design; results come back in input order regardless of ``jobs``."""
    designs = list(designs)
    if not designs:
        raise ValueError("no designs given")
    tasks = []
    for i, des in enumerate(designs):
        for start in range(0, des.reps, chunk):
            tasks.append((i, (des, list(range(start, min(start + chunk, des.reps))))))
    if jobs <= 1:
        outs = [_run_chunk(t) for _, t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_run_chunk, [t for _, t in tasks]))
    per = [[] for _ in designs]
    for (i, _), o in zip(tasks, outs):
        per[i].extend(o)
    return [_aggregate(des, o) for des, o in zip(designs, per)]


def grid_designs(r2_values, mu: int = 0, **kw) -> list:
    """Designs over ``r2_d x r2_y`` (r2_d outer) with shared settings."""
    return [McDesign(mu=mu, r2_d=rd, r2_y=ry, **kw) for rd in r2_values for ry in r2_values]


CSV_FIELDS = ("r2_y", "r2_d", "mu", "method", "rejection", "avg_len", "bias", "failures")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_grid_csv(results, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for res in results:
            for row in res.rows():
                w.writerow([_fmt(row[k]) for k in CSV_FIELDS])


def write_grid_json(results, path) -> None:
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    doc = {
        "schema": "hdqr-mc/1",
        "cells": [
            {
                "design": asdict(r.design),
                "rejection": {k: clean(v) for k, v in r.rejection.items()},
                "avg_len": {k: clean(v) for k, v in r.avg_len.items()},
                "bias": {k: clean(v) for k, v in r.bias.items()},
                "failures": r.failures,
                "successes": r.successes,
                "cell_failed": r.cell_failed,
            }
            for r in results
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_surfaces(results, outdir) -> list:
    """One gnuplot-style ``r2_d r2_y rejection`` table per region, blank line between r2_d blocks."""
    paths = []
    for region in REGIONS:
        path = os.path.join(outdir, f"surface_{region}.dat")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# r2_d r2_y rejection\n")
            prev = None
            for r in sorted(results, key=lambda r: (r.design.r2_d, r.design.r2_y)):
                if prev is not None and r.design.r2_d != prev:
                    fh.write("\n")
                prev = r.design.r2_d
                fh.write(f"{r.design.r2_d} {r.design.r2_y} {_fmt(r.rejection[region])}\n")
        paths.append(path)
    return paths


def generate_structural(n: int = 5000, p: int = 30, seed: int = 0) -> Dataset:
    """Synthetic ``p << n`` data set: intercept plus correlated mixed-scale controls.

    The outcome depends on every control with heteroscedastic, skewed noise.
    """
    rng = replication_rng(seed, 0)
    m = p - 1
    z = ar1_draw(rng, n, m, 0.5)
    half = m // 2
    z[:, :half] = (z[:, :half] > 0.3).astype(float)
    x = np.column_stack([np.ones(n), z])
    b = rng.uniform(-1.0, 1.0, p) / np.sqrt(np.arange(1, p + 1))
    a = rng.uniform(-0.5, 0.5, p) / np.arange(1, p + 1)
    d = x @ a + rng.standard_normal(n)
    scale = 1.0 + 0.3 * np.abs(z[:, -1])
    y = 0.5 * d + x @ b + scale * rng.standard_normal(n)
    names = ["const"] + [f"z{j}" for j in range(1, p)]
    return Dataset(y=y, d=d, x=x, column_names=names)


def write_dataset_csv(data: Dataset, path, y: str = "y", d: str = "d") -> None:
    """Write a data set in the CSV layout read by ``hdqr infer``."""
    names = list(data.column_names) if data.column_names else [f"x{j}" for j in range(data.p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([y, d] + names)
        for i in range(data.n):
            w.writerow([repr(float(v)) for v in (data.y[i], data.d[i], *data.x[i])])
