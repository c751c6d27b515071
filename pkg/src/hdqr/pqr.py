"""l1-penalized quantile regression, post-selection refits and penalty rules.

Two engines solve the nonsmooth convex program

    min_b  E_n[w_i rho_tau(y_i - z_i'b)] + sum_j pen_j |b_j|

``"lp"`` passes the equivalent linear program to HiGHS and returns a vertex
solution together with exact dual multipliers; ``"admm"`` is an
over-relaxed operator-splitting scheme that never forms the LP.  Both feed
the same KKT certificate, computed from a dual vector projected onto the
check-loss subdifferential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.optimize import linprog

from .core import SparseCoef, check_loss, inv_normal_cdf
from .errors import DegenerateDesign, DomainError, PositivityError, RankDeficient

ADMM_RELAXATION = 1.7


@dataclass(frozen=True)
class PqrConfig:
    """Settings for one penalized quantile regression fit.

    ``lam`` multiplies ``||beta||_1 / n``.  ``penalty_d_loading`` is the
    loading on ``|alpha|``; ``None`` means ``sqrt(E_n[d^2])``.
    """

    tau: float
    lam: float
    penalty_d_loading: Optional[float] = None
    unpenalized: tuple = ()
    tol: float = 1e-8
    max_iter: int = 20000
    engine: str = "lp"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise DomainError(f"tau must lie in (0, 1), got {self.tau}")
        if self.lam < 0:
            raise DomainError("lam must be nonnegative")
        if self.tol <= 0:
            raise DomainError("tol must be positive")
        if self.engine not in ("lp", "admm"):
            raise DomainError(f"unknown engine {self.engine!r}")
        object.__setattr__(self, "unpenalized", tuple(sorted(int(j) for j in self.unpenalized)))


@dataclass(frozen=True)
class QrFit:
    alpha: float
    beta: SparseCoef
    objective: float
    kkt_gap: float
    iterations: int
    converged: bool
    dual: Optional[np.ndarray] = field(default=None, repr=False)
    dropped: tuple = ()

    def fitted(self, d, x):
        return np.asarray(d) * self.alpha + np.asarray(x) @ self.beta.values


def _subgradient_dual(resid, a, tau, zero_tol):
    # project onto the subdifferential of rho_tau at each residual
    a = np.clip(a, tau - 1.0, tau)
    a = np.where(resid > zero_tol, tau, a)
    return np.where(resid < -zero_tol, tau - 1.0, a)


def kkt_gap(z, y, coef, dual, tau, pen, weights=None, zero_tol=1e-9):
    """Largest violation of the optimality conditions at ``coef``.

    ``dual`` holds candidate subgradients of the check loss; it is first
    projected onto the subdifferential at each residual, so the returned
    gap certifies stationarity with an exactly feasible dual.
    """
    n = y.shape[0]
    w = np.ones(n) if weights is None else weights
    resid = y - z @ coef
    a = _subgradient_dual(resid, dual, tau, zero_tol)
    g = z.T @ (w * a) / n
    active = coef != 0
    viol = np.where(active, np.abs(g - pen * np.sign(coef)), np.maximum(np.abs(g) - pen, 0.0))
    return float(viol.max()) if viol.size else 0.0


def _objective(z, y, coef, tau, pen, w):
    return float(np.mean(w * check_loss(y - z @ coef, tau)) + np.sum(pen * np.abs(coef)))


def _solve_lp(z, y, tau, pen, w):
    n, k = z.shape
    # b = b_plus - b_minus ; y - z b = u_plus - u_minus
    c = np.concatenate([pen, pen, w * tau / n, w * (1.0 - tau) / n])
    zs = sparse.csc_matrix(z)
    eye = sparse.identity(n, format="csc")
    a_eq = sparse.hstack([zs, -zs, eye, -eye], format="csc")
    tight = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}
    # dual simplex occasionally stalls at tight tolerances; interior point with crossover
    # still returns a vertex
    for method, opts in (("highs-ds", tight), ("highs-ipm", tight), ("highs-ds", {})):
        res = linprog(c, A_eq=a_eq, b_eq=y, bounds=(0, None), method=method, options=opts)
        if res.status == 0:
            break
    else:
        raise DegenerateDesign(f"linear program failed: {res.message}")
    coef = res.x[:k] - res.x[k:2 * k]
    # marginal of the objective in y_i equals w_i a_i / n
    dual = n * res.eqlin.marginals / w
    return coef, dual, int(getattr(res, "nit", 0))


def _solve_admm(z, y, tau, pen, w, tol, max_iter):
    n, k = z.shape
    # scaled problem: sum_i w_i rho(r_i) + n sum_j pen_j |c_j|
    npen = n * pen
    rho = 1.0
    relax = ADMM_RELAXATION

    def factor(rho_):
        if k <= n:
            return ("chol", scipy.linalg.cho_factor(z.T @ z + np.eye(k)))
        return ("wood", scipy.linalg.cho_factor(np.eye(n) + z @ z.T))

    def solve(fac, rhs):
        kind, f = fac
        if kind == "chol":
            return scipy.linalg.cho_solve(f, rhs)
        return rhs - z.T @ scipy.linalg.cho_solve(f, z @ rhs)

    fac = factor(rho)
    b = np.zeros(k)
    r = y.copy()
    c = np.zeros(k)
    u = np.zeros(n)
    v = np.zeros(k)
    scale = 1.0 + np.max(np.abs(y))
    it = 0
    for it in range(1, max_iter + 1):
        b = solve(fac, z.T @ (y - r - u) + (c - v))
        zb = z @ b
        h_top = relax * zb + (1 - relax) * (y - r)
        h_bot = relax * b + (1 - relax) * c
        t = y - h_top - u
        kappa = w / rho
        r_old = r
        r = np.where(t > kappa * tau, t - kappa * tau,
                     np.where(t < -kappa * (1 - tau), t + kappa * (1 - tau), 0.0))
        c_old = c
        q = h_bot + v
        c = np.sign(q) * np.maximum(np.abs(q) - npen / rho, 0.0)
        u = u + h_top + r - y
        v = v + h_bot - c
        if it % 25 == 0:
            prim = max(np.max(np.abs(zb + r - y), initial=0.0), np.max(np.abs(b - c), initial=0.0))
            dual_res = rho * max(np.max(np.abs(z.T @ (r - r_old)), initial=0.0),
                                 np.max(np.abs(c - c_old), initial=0.0))
            if prim < tol * scale and dual_res < tol * scale:
                break
            if it % 250 == 0:
                if prim > 10 * dual_res:
                    rho *= 2.0
                    u /= 2.0
                    v /= 2.0
                    fac = factor(rho)
                elif dual_res > 10 * prim:
                    rho /= 2.0
                    u *= 2.0
                    v *= 2.0
                    fac = factor(rho)
    dual = -rho * u / w
    return c, dual, it


def _fit(z, y, tau, pen, w, tol, max_iter, engine):
    n, k = z.shape
    if engine == "lp":
        coef, dual, iters = _solve_lp(z, y, tau, pen, w)
        zero_tol = 1e-9 * (1.0 + np.max(np.abs(y)))
    else:
        coef, dual, iters = _solve_admm(z, y, tau, pen, w, tol, max_iter)
        zero_tol = math.sqrt(tol) * (1.0 + np.max(np.abs(y)))
    if k:
        coef = np.where(np.abs(coef) < 1e-10 * (1.0 + np.max(np.abs(coef))), 0.0, coef)
    gap = kkt_gap(z, y, coef, dual, tau, pen, w, zero_tol)
    lam_scale = 1.0 + np.max(pen, initial=0.0)
    converged = gap <= 10 * tol * lam_scale and iters < max_iter
    return coef, dual, gap, iters, converged


def solve_l1qr(d, x, y, config: PqrConfig) -> QrFit:
    """Penalized quantile regression of ``y`` on ``d`` and ``x``.

    Minimizes ``E_n[rho_tau(y - d*alpha - x'beta)] + lam/n ||beta||_1
    + lam/n * L_d * |alpha|`` where ``L_d`` is ``config.penalty_d_loading``.
    Columns listed in ``config.unpenalized`` carry no penalty.
    """
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.shape[0], -1)
    n, p = x.shape
    ld = config.penalty_d_loading
    if ld is None:
        ld = math.sqrt(np.mean(d ** 2))
    pen = np.full(1 + p, config.lam / n)
    pen[0] *= ld
    for j in config.unpenalized:
        pen[1 + j] = 0.0
    z = np.column_stack([d, x])
    coef, dual, gap, iters, converged = _fit(
        z, y, config.tau, pen, np.ones(n), config.tol, config.max_iter, config.engine)
    return QrFit(
        alpha=float(coef[0]),
        beta=SparseCoef(coef[1:]),
        objective=_objective(z, y, coef, config.tau, pen, np.ones(n)),
        kkt_gap=gap,
        iterations=iters,
        converged=converged,
        dual=dual,
    )


def _independent_columns(z, tol=1e-10):
    """Indices of columns kept when dependent columns are dropped last-first."""
    keep = []
    for j in range(z.shape[1]):
        cand = keep + [j]
        sv = np.linalg.svd(z[:, cand], compute_uv=False)
        if sv[-1] > tol * max(sv[0], 1.0) * math.sqrt(z.shape[0]):
            keep.append(j)
    return keep


def post_refit_qr(d, x, y, tau: float, support: Sequence[int] = (),
                  weights=None, tol: float = 1e-8, engine: str = "lp",
                  on_rank_deficient: str = "drop") -> QrFit:
    """Unpenalized (weighted) quantile regression on ``d`` and ``x[:, support]``.

    With ``weights`` the loss is ``E_n[w_i rho_tau(.)]``.  Numerically
    dependent columns are dropped (last ones first) and listed in
    ``QrFit.dropped``; ``on_rank_deficient="raise"`` raises instead.
    """
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.shape[0], -1)
    n, p = x.shape
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    support = sorted(set(int(j) for j in support))
    if support and (support[0] < 0 or support[-1] >= p):
        raise DomainError("support indices out of range")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(~(w > 0)):
            raise PositivityError("weights must be a strictly positive n-vector")
    z = np.column_stack([d, x[:, support]])
    keep = _independent_columns(z * w[:, None])
    dropped = tuple(support[j - 1] for j in range(1, z.shape[1]) if j not in keep)
    if 0 not in keep:
        raise RankDeficient("treatment column is numerically zero")
    if dropped and on_rank_deficient == "raise":
        raise RankDeficient(f"dependent control columns {list(dropped)}")
    zk = z[:, keep]
    pen = np.zeros(zk.shape[1])
    coef_k, dual, gap, iters, converged = _fit(zk, y, tau, pen, w, tol, 10 * 20000, engine)
    coef = np.zeros(z.shape[1])
    coef[keep] = coef_k
    beta = np.zeros(p)
    beta[support] = coef[1:]
    return QrFit(
        alpha=float(coef[0]),
        beta=SparseCoef(beta),
        objective=_objective(zk, y, coef_k, tau, pen, w),
        kkt_gap=gap,
        iterations=iters,
        converged=converged,
        dual=dual,
        dropped=dropped,
    )


def penalty_gamma(n: int, p: int) -> float:
    return 0.05 / max(n, p * math.log(n))


def default_lambda_tau(n: int, p: int, tau: float) -> float:
    """``1.1 sqrt(n tau (1-tau)) Phi^{-1}(1-gamma)``, gamma = 0.05/max(n, p log n)."""
    return 1.1 * math.sqrt(n * tau * (1.0 - tau)) * inv_normal_cdf(1.0 - penalty_gamma(n, p))


def pivotal_penalty(xtilde, u: float, gamma: float, B: int = 1000, seed: int = 0) -> float:
    """Simulated (1-gamma)-quantile of ``||E_n[(u - 1{U_i <= u}) x_i]||_inf``.

    Replication ``b`` draws its uniforms from a generator seeded by
    ``(seed, b)``, so the result does not depend on evaluation order.
    """
    if B < 100:
        raise DomainError("need at least 100 simulations")
    if not 0.0 < gamma < 1.0:
        raise DomainError("gamma must lie in (0, 1)")
    xt = np.asarray(xtilde, dtype=float)
    if xt.ndim == 1:
        xt = xt[:, None]
    n = xt.shape[0]
    draws = np.empty((B, n))
    for b in range(B):
        draws[b] = np.random.default_rng([seed, b]).random(n)
    stats = np.max(np.abs((u - (draws <= u)) @ xt), axis=1) / n
    stats.sort()
    k = math.ceil((1.0 - gamma) * B - 1e-9)
    return float(stats[max(k, 1) - 1])


def default_truncation_k(n: int, p: int, max_abs_x: float) -> int:
    """Recommended truncation level used in place of the unknown ``2s``."""
    if n < 3:
        raise DomainError("need n >= 3")
    if max_abs_x <= 0:
        raise DomainError("max_abs_x must be positive")
    ln = math.log(n)
    lpn = math.log(max(p, n))
    inner = min(n ** (1.0 / 3.0) / lpn, math.sqrt(n) * lpn ** -1.5 / max_abs_x)
    return max(int(math.floor(10.0 / ln * (ln + inner))), 1)
