"""Post-selection inference on the treatment coefficient.

``OPTIMAL_IV``: penalized QR -> truncation -> refit; density-weighted Lasso
and Post-Lasso for the instrument; exact score minimization.
``DOUBLE_SELECTION``: penalized QR and weighted Lasso select controls; a
density-weighted QR on their union gives the estimate.
``NAIVE``: penalized QR selection followed by an unweighted refit.
``FULL``: unpenalized QR on every control (p << n baseline).

All stages for one dataset are computed once by :class:`Stages` and shared
between methods.
"""

from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import Dataset, SparseCoef, standardize, truncate_top_k
from .density import DensityConfig, estimate_density, quantile_indices
from .errors import (EmptyRegion, HdqrError, IdentificationError, PositivityError, RankDeficient,
                     StageError)
from .ivqr import (InferenceReport, SearchInterval, build_score_curve, inversion_ci,
                   minimize_score, score_statistic, variance_estimators, wald_ci)
from .pqr import PqrConfig, default_lambda_tau, default_truncation_k, post_refit_qr, solve_l1qr
from .wlasso import WLassoConfig, fit_wlasso

OPTIMAL_IV = "optiv"
DOUBLE_SELECTION = "double"
NAIVE = "naive"
FULL = "full"
METHODS = (OPTIMAL_IV, DOUBLE_SELECTION, NAIVE, FULL)

KNOWN = "known"
HOMOSCEDASTIC = "homoscedastic"
ESTIMATED = "estimated"

DEFAULT_SIGMA = {OPTIMAL_IV: "sigma3", DOUBLE_SELECTION: "sigma2", NAIVE: "sigma2", FULL: "sigma2"}


@dataclass(frozen=True)
class PipelineConfig:
    """Run settings.

    ``density`` is ``"known"`` (with ``known_density``), ``"homoscedastic"``
    (a single density level estimated from the Step-1 refit residuals) or
    ``"estimated"`` (per-observation weights from quantile fits at
    ``tau +- h``, and ``tau +- 2h`` for second order).  Estimated weights
    are capped at ``cap_ratio`` times their median by default.

    Unless ``penalize_intercept`` is set, a column of ones in ``x`` is left
    unpenalized in both penalized fits and always survives truncation.
    """

    tau: float = 0.5
    method: str = DOUBLE_SELECTION
    density: str = ESTIMATED
    known_density: Optional[np.ndarray] = field(default=None, compare=False)
    density_config: DensityConfig = DensityConfig(cap_ratio=3.0)
    penalize_intercept: bool = False
    lam_tau: Optional[float] = None
    truncation_k: Optional[int] = None
    engine: str = "lp"
    wlasso_config: WLassoConfig = WLassoConfig()
    xi: float = 0.05
    sigma_choice: Optional[str] = None
    B_pivotal: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.density not in (KNOWN, HOMOSCEDASTIC, ESTIMATED):
            raise ValueError(f"unknown density mode {self.density!r}")
        if self.density == KNOWN and self.known_density is None:
            raise ValueError("known density mode needs known_density")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.sigma_choice not in (None, "sigma1", "sigma2", "sigma3"):
            raise ValueError(f"unknown sigma choice {self.sigma_choice!r}")


def _stage(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(self):
            if name in self._cache:
                return self._cache[name]
            t0 = time.perf_counter()
            try:
                out = fn(self)
            except StageError:
                raise
            except (HdqrError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                raise StageError(name, exc) from exc
            self.timings[name] = time.perf_counter() - t0
            self._cache[name] = out
            return out
        return property(wrapper)
    return deco


class Stages:
    """Lazily evaluated, cached estimation stages for one dataset."""

    def __init__(self, data: Dataset, config: PipelineConfig):
        self.data = data
        self.config = config
        self.design = standardize(data)
        self.x = self.design.x_std
        self.y = data.y
        self.d = data.d
        self.n, self.p = self.x.shape
        self.timings = {}
        self._cache = {}
        self.density_estimate = None
        ic = self.design.intercept_col
        self.free = () if (ic is None or config.penalize_intercept) else (ic,)

    # Step 1 -----------------------------------------------------------
    @property
    def lam_tau(self):
        c = self.config
        return c.lam_tau if c.lam_tau is not None else default_lambda_tau(self.n, self.p, c.tau)

    @property
    def k(self):
        if self.config.truncation_k is not None:
            return min(self.config.truncation_k, self.p)
        return min(default_truncation_k(self.n, self.p, float(np.max(np.abs(self.x)))), self.p)

    def _penalized(self, u, lam):
        cfg = PqrConfig(tau=u, lam=lam, unpenalized=self.free, engine=self.config.engine)
        return solve_l1qr(self.d, self.x, self.y, cfg)

    def _with_free(self, support):
        return tuple(sorted(set(int(j) for j in support) | set(self.free)))

    def _truncate(self, beta):
        """Top-``k`` penalized coefficients plus any unpenalized columns."""
        if not self.free:
            return truncate_top_k(beta, self.k)
        v = beta.values.copy()
        keep = v[list(self.free)].copy()
        v[list(self.free)] = 0.0
        out = truncate_top_k(SparseCoef(v), self.k).values.copy()
        out[list(self.free)] = keep
        return SparseCoef(out)

    @_stage("step1")
    def step1(self):
        return self._penalized(self.config.tau, self.lam_tau)

    @_stage("step1_truncated")
    def beta_trunc(self):
        return self._truncate(self.step1.beta)

    @_stage("step1_refit")
    def refit(self):
        return post_refit_qr(self.d, self.x, self.y, self.config.tau,
                             self._with_free(self.beta_trunc.support), engine=self.config.engine)

    # density ----------------------------------------------------------
    @property
    def h(self):
        c = self.config.density_config
        return c.resolve_h(self.n, self.config.tau)

    @_stage("density")
    def density(self):
        """``(f, summary)`` with ``f`` on the caller's scale."""
        c = self.config
        if c.density == KNOWN:
            f = np.asarray(c.known_density, dtype=float)
            if f.shape != (self.n,) or not np.all(f > 0):
                raise PositivityError("known density must be a positive n-vector")
            return f, _summary(f, 0, None)
        if c.density == HOMOSCEDASTIC:
            return self.homoscedastic_density
        tau, h = c.tau, self.h
        preds, fits = {}, {}
        for u in quantile_indices(tau, h, c.density_config.order):
            pen = self._penalized(u, default_lambda_tau(self.n, self.p, u))
            trunc = self._truncate(pen.beta)
            ref = post_refit_qr(self.d, self.x, self.y, u, self._with_free(trunc.support), engine=c.engine)
            preds[u] = ref.fitted(self.d, self.x)
            fits[u] = ref
        est = estimate_density(preds, tau, c.density_config, h=h, quantile_fits=fits)
        self.density_estimate = est
        return est.fhat, _summary(est.fhat, est.trimmed_count, h)

    @_stage("homoscedastic_density")
    def homoscedastic_density(self):
        """A single density level from the residual quantiles of the Step-1 refit."""
        return self._level_from(self.y - self.refit.fitted(self.d, self.x))

    def _level_from(self, resid):
        c = self.config
        tau, h = c.tau, self.h
        preds = {u: np.full(self.n, np.quantile(resid, u))
                 for u in quantile_indices(tau, h, c.density_config.order)}
        est = estimate_density(preds, tau, c.density_config, h=h)
        self.density_estimate = est
        return est.fhat, _summary(est.fhat, est.trimmed_count, h)

    @property
    def f_scale(self):
        f, _ = self.density
        if np.all(f == f[0]):
            return float(f[0])
        return float(np.mean(f))

    @property
    def f_unit(self):
        # weights normalised to mean one; every point estimate is invariant to this scale
        f, _ = self.density
        return f / self.f_scale

    # Step 2 -----------------------------------------------------------
    @_stage("step2")
    def step2(self):
        wc = self.config.wlasso_config
        if self.free:
            wc = replace(wc, unpenalized=tuple(sorted(set(wc.unpenalized) | set(self.free))))
        h = self.h if wc.lambda_rule == "bandwidth" else None
        return fit_wlasso(self.x, self.d, self.f_unit, wc, h=h)

    @property
    def vtilde(self):
        return self.step2.post_residuals

    @property
    def union_support(self):
        return self._with_free(set(self.beta_trunc.support) | set(self.step2.theta.support))

    def interval(self, center):
        return SearchInterval.around(center, self.d, self.n)

    # Step 3 -----------------------------------------------------------
    @_stage("optiv")
    def optiv(self):
        fit = self.refit
        gfit = self.x @ fit.beta.values
        alpha, curve = minimize_score(self.y, self.d, gfit, self.vtilde, self.config.tau,
                                      self.interval(fit.alpha), tie_center=fit.alpha)
        return alpha, fit.beta.values, curve, self.union_support

    @_stage("double")
    def double(self):
        support = self.union_support
        if len(support) >= self.n - 1:
            raise RankDeficient(f"union of selected controls has {len(support)} columns for n={self.n}")
        fit = post_refit_qr(self.d, self.x, self.y, self.config.tau, support,
                            weights=self.f_unit, engine=self.config.engine)
        curve = build_score_curve(self.y, self.d, self.x @ fit.beta.values, self.vtilde,
                                  self.config.tau, self.interval(self.step1.alpha))
        return fit.alpha, fit.beta.values, curve, support

    @_stage("naive")
    def naive(self):
        support = self._with_free(self.step1.beta.support)
        fit = post_refit_qr(self.d, self.x, self.y, self.config.tau, support, engine=self.config.engine)
        return fit.alpha, fit.beta.values, None, support

    @_stage("full")
    def full(self):
        support = tuple(range(self.p))
        fit = post_refit_qr(self.d, self.x, self.y, self.config.tau, support, engine=self.config.engine)
        return fit.alpha, fit.beta.values, None, support

    def report(self, method: str) -> InferenceReport:
        c = self.config
        if float(np.mean(self.d ** 2)) == 0.0:
            raise StageError("step3", IdentificationError("E_n[d^2] = 0: treatment is identically zero"))
        alpha, beta, curve, support = getattr(self, method)
        if method in (OPTIMAL_IV, DOUBLE_SELECTION) or c.density == KNOWN:
            f_act, fsum = self.density
        elif method == FULL:
            f_act, fsum = self._level_from(self.y - self.d * alpha - self.x @ beta)
        else:
            f_act, fsum = self.homoscedastic_density
        if method in (OPTIMAL_IV, DOUBLE_SELECTION):
            v_act = self.vtilde * self.f_scale
        else:
            # no instrument stage: residualize d on the refit controls for sigma1/sigma3
            v_act = _partial_out(self.d, self.x, support, f_act)
        try:
            sig = variance_estimators(self.y, self.d, self.x, f_act, v_act, alpha, beta, support, c.tau)
        except (HdqrError, ArithmeticError) as exc:
            raise StageError("variance", exc) from exc
        choice = c.sigma_choice or DEFAULT_SIGMA[method]
        sigma = getattr(sig, choice)
        if sigma is None:
            choice, sigma = "sigma3", sig.sigma3
        ci = wald_ci(alpha, sigma, self.n, c.xi)
        ci_inv, is_int, ln = None, None, None
        if curve is not None:
            ln = self.n * score_statistic(alpha, self.y, self.d, self.x @ beta, self.vtilde, c.tau)
            try:
                region = inversion_ci(curve, self.n, c.xi)
                ci_inv, is_int = (region.lo, region.hi), region.is_interval
            except EmptyRegion:
                ci_inv, is_int = None, False
        supports = {"final": list(support)}
        if method != FULL:
            supports["step1"] = list(self.step1.beta.support)
        if method in (OPTIMAL_IV, DOUBLE_SELECTION):
            supports["step1_truncated"] = list(self.beta_trunc.support)
            supports["step2"] = list(self.step2.theta.support)
            supports["post_lasso"] = list(self.step2.post_theta.support)
        resolved = {
            "lambda_tau": self.lam_tau,
            "truncation_k": self.k,
            "density": c.density,
            "engine": c.engine,
            "unpenalized": list(self.free),
        }
        if c.density != KNOWN or method in (NAIVE, FULL):
            resolved["h"] = self.h
            resolved["density_order"] = c.density_config.order
        if method in (OPTIMAL_IV, DOUBLE_SELECTION):
            resolved["lambda_wlasso"] = self.step2.lam
            resolved["loading_iters"] = c.wlasso_config.loading_iters
            resolved["search_interval"] = [curve.lo, curve.hi]
        if method == OPTIMAL_IV:
            alpha_tilde = self.refit.alpha
        elif method == FULL:
            alpha_tilde = None
        else:
            alpha_tilde = self.step1.alpha
        return InferenceReport(
            method=method, tau=c.tau, n=self.n, p=self.p,
            alpha_check=float(alpha), se=sigma / math.sqrt(self.n), sigma_choice=choice,
            sigma1=sig.sigma1, sigma2=sig.sigma2, sigma3=sig.sigma3,
            ci_wald=ci, ci_inversion=ci_inv, inversion_is_interval=is_int,
            ln_at_estimate=ln, supports=supports, fhat_summary=fsum, resolved=resolved,
            seed=c.seed, alpha_tilde=alpha_tilde, xi=c.xi,
            timings=dict(self.timings), curve=curve,
        )


def _partial_out(d, x, support, f):
    support = sorted(support)
    if not support:
        return f * d
    a = f[:, None] * x[:, support]
    coef, *_ = np.linalg.lstsq(a, f * d, rcond=None)
    return f * d - a @ coef


def _summary(f, trimmed, h):
    return {"min": float(np.min(f)), "max": float(np.max(f)), "mean": float(np.mean(f)),
            "trimmed": int(trimmed), "h": h}


def run_methods(data: Dataset, config: PipelineConfig, methods) -> dict:
    """Reports for several methods sharing one set of stages."""
    stages = Stages(data, config)
    return {m: stages.report(m) for m in methods}


def run_algorithm1(data: Dataset, config: PipelineConfig) -> InferenceReport:
    return Stages(data, replace(config, method=OPTIMAL_IV)).report(OPTIMAL_IV)


def run_algorithm2(data: Dataset, config: PipelineConfig) -> InferenceReport:
    return Stages(data, replace(config, method=DOUBLE_SELECTION)).report(DOUBLE_SELECTION)


def run_naive(data: Dataset, config: PipelineConfig) -> InferenceReport:
    return Stages(data, replace(config, method=NAIVE)).report(NAIVE)


def run_full(data: Dataset, config: PipelineConfig) -> InferenceReport:
    return Stages(data, replace(config, method=FULL)).report(FULL)


def run(data: Dataset, config: PipelineConfig) -> InferenceReport:
    return Stages(data, config).report(config.method)
