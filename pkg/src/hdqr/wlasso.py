"""Density-weighted Lasso with data-driven penalty loadings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import SparseCoef, inv_normal_cdf
from .errors import DomainError, MissingBandwidth, NotConverged, PositivityError
from .pqr import _independent_columns, penalty_gamma

STANDARD = "standard"
BANDWIDTH_ADJUSTED = "bandwidth"


@dataclass(frozen=True)
class WLassoConfig:
    lam: Optional[float] = None
    loading_iters: int = 2
    tol: float = 1e-10
    max_iter: int = 10000
    lambda_rule: str = STANDARD
    unpenalized: tuple = ()

    def __post_init__(self):
        if self.lam is not None and self.lam <= 0:
            raise DomainError("lam must be positive")
        if self.loading_iters < 1:
            raise DomainError("loading_iters must be at least 1")
        if self.lambda_rule not in (STANDARD, BANDWIDTH_ADJUSTED):
            raise DomainError(f"unknown lambda rule {self.lambda_rule!r}")


@dataclass(frozen=True)
class WLassoFit:
    theta: SparseCoef
    loadings: np.ndarray
    residuals: np.ndarray
    post_theta: SparseCoef
    post_residuals: np.ndarray
    kkt_gap: float
    lam: float
    dropped: tuple = ()


def default_lambda_wlasso(n: int, p: int, rule: str = STANDARD, h: Optional[float] = None) -> float:
    """Penalty level for the weighted Lasso.

    ``"standard"``: ``2.2 sqrt(n) Phi^{-1}(1-gamma)``;
    ``"bandwidth"``: ``sqrt(n) Phi^{-1}(1-gamma) / h``.
    """
    z = inv_normal_cdf(1.0 - penalty_gamma(n, p))
    if rule == STANDARD:
        return 1.1 * math.sqrt(n) * 2.0 * z
    if rule == BANDWIDTH_ADJUSTED:
        if h is None:
            raise MissingBandwidth("the bandwidth-adjusted rule needs h")
        if not 0.0 < h:
            raise DomainError("h must be positive")
        return math.sqrt(n) * z / h
    raise DomainError(f"unknown lambda rule {rule!r}")


def _check_weights(fhat, n):
    f = np.asarray(fhat, dtype=float)
    if f.shape != (n,):
        raise DomainError("fhat must be an n-vector")
    if not np.all(f > 0):
        raise PositivityError("density weights must be strictly positive")
    return f


def wlasso_objective(x, d, fhat, theta, loadings, lam):
    n = d.shape[0]
    r = d - x @ theta
    return float(np.mean(fhat ** 2 * r ** 2) + lam / n * np.sum(loadings * np.abs(theta)))


def _kkt(gram, cross, theta, thresh):
    grad = 2.0 * (cross - gram @ theta)
    active = theta != 0
    viol = np.where(active, np.abs(grad - thresh * np.sign(theta)),
                    np.maximum(np.abs(grad) - thresh, 0.0))
    return float(viol.max()) if viol.size else 0.0


def _coordinate_descent(gram, cross, thresh, tol, max_iter, theta0=None, trace=None):
    """Cyclic coordinate descent on ``theta'G theta - 2 c'theta + sum t_j |theta_j|``.

    Sweeps run in ascending index order; after each full sweep the active
    coordinates are iterated to convergence before the next full sweep.
    """
    p = cross.shape[0]
    theta = np.zeros(p) if theta0 is None else theta0.copy()
    diag = np.diag(gram).copy()
    grad_part = cross - gram @ theta  # c - G theta

    def sweep(idx):
        delta = 0.0
        for j in idx:
            old = theta[j]
            rho = grad_part[j] + diag[j] * old
            new = math.copysign(max(abs(rho) - thresh[j] / 2.0, 0.0), rho) / diag[j]
            if new != old:
                step = new - old
                grad_part[:] -= gram[:, j] * step
                theta[j] = new
                delta = max(delta, abs(step) * math.sqrt(diag[j]))
        return delta

    full = range(p)
    sweeps = 0
    while sweeps < max_iter:
        sweeps += 1
        delta = sweep(full)
        if trace is not None:
            trace.append(theta.copy())
        if delta < tol:
            return theta, sweeps, True
        active = np.flatnonzero(theta)
        while sweeps < max_iter:
            sweeps += 1
            if sweep(active) < tol:
                break
    return theta, sweeps, False


def solve_wlasso(x, d, fhat, loadings, lam: float, tol: float = 1e-10,
                 max_iter: int = 10000, trace=None, unpenalized=()):
    """Minimize ``E_n[f^2 (d - x'theta)^2] + lam/n ||diag(loadings) theta||_1``.

    Columns in ``unpenalized`` carry no penalty.  Returns
    ``(SparseCoef, kkt_gap)``.  Raises :class:`NotConverged` on the
    iteration cap.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    n, p = x.shape
    f = _check_weights(fhat, n)
    loadings = np.asarray(loadings, dtype=float)
    if loadings.shape != (p,) or np.any(loadings <= 0):
        raise PositivityError("loadings must be a strictly positive p-vector")
    w = f ** 2
    xw = x * w[:, None]
    gram = xw.T @ x / n
    cross = xw.T @ d / n
    thresh = lam * loadings / n
    thresh[list(unpenalized)] = 0.0
    theta, _, ok = _coordinate_descent(gram, cross, thresh, tol, max_iter, trace=trace)
    if not ok:
        raise NotConverged(f"coordinate descent hit {max_iter} sweeps")
    gap = _kkt(gram, cross, theta, thresh)
    return SparseCoef(theta), gap


def post_lasso(x, d, fhat, support: Sequence[int]):
    """Weighted least squares of ``f d`` on ``f x[:, support]``.

    Dependent columns are dropped (trailing first).  Returns
    ``(SparseCoef, dropped)``.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    n, p = x.shape
    f = _check_weights(fhat, n)
    theta = np.zeros(p)
    support = sorted(set(int(j) for j in support))
    if not support:
        return SparseCoef(theta), ()
    a = f[:, None] * x[:, support]
    keep = _independent_columns(a)
    dropped = tuple(support[j] for j in range(len(support)) if j not in keep)
    ak = a[:, keep]
    qk, rk = np.linalg.qr(ak)
    coef = np.linalg.solve(rk, qk.T @ (f * d))
    theta[[support[j] for j in keep]] = coef
    return SparseCoef(theta), dropped


def penalty_loadings(x, d, fhat, lam: float, loading_iters: int = 2,
                     tol: float = 1e-10, max_iter: int = 10000, unpenalized=()) -> np.ndarray:
    """Iterated penalty loadings.

    Starts from ``max_i f_i * sqrt(E_n[x_j^2 f^2 d^2])``; each further pass
    fits Lasso and Post-Lasso with the current loadings and resets
    ``loading_j = sqrt(E_n[f^2 x_j^2 v^2])`` with ``v = f (d - x'theta)``.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    f = _check_weights(fhat, d.shape[0])
    gam = f.max() * np.sqrt(np.mean(x ** 2 * (f ** 2 * d ** 2)[:, None], axis=0))
    gam = _floor(gam)
    for _ in range(loading_iters - 1):
        theta, _ = solve_wlasso(x, d, f, gam, lam, tol, max_iter, unpenalized=unpenalized)
        post, _ = post_lasso(x, d, f, theta.support)
        v = f * (d - x @ post.values)
        gam = _floor(np.sqrt(np.mean(x ** 2 * (f ** 2 * v ** 2)[:, None], axis=0)))
    return gam


def _floor(gam):
    top = gam.max() if gam.size else 1.0
    return np.maximum(gam, 1e-12 * max(top, 1e-300))


def fit_wlasso(x, d, fhat, config: WLassoConfig = WLassoConfig(), h: Optional[float] = None) -> WLassoFit:
    """Loadings, Lasso, Post-Lasso and instrument residuals in one call."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    n, p = x.shape
    f = _check_weights(fhat, n)
    lam = config.lam if config.lam is not None else default_lambda_wlasso(n, p, config.lambda_rule, h)
    gam = penalty_loadings(x, d, f, lam, config.loading_iters, config.tol, config.max_iter,
                           config.unpenalized)
    theta, gap = solve_wlasso(x, d, f, gam, lam, config.tol, config.max_iter,
                              unpenalized=config.unpenalized)
    post, dropped = post_lasso(x, d, f, theta.support)
    return WLassoFit(
        theta=theta,
        loadings=gam,
        residuals=f * d - f * (x @ theta.values),
        post_theta=post,
        post_residuals=f * d - f * (x @ post.values),
        kkt_gap=gap,
        lam=lam,
        dropped=dropped,
    )
