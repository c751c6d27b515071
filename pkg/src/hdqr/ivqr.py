"""Instrumental quantile regression through the orthogonal score statistic.

``L_n(alpha)`` only changes where an indicator ``1{y_i <= d_i alpha + g_i}``
flips, i.e. at ``(y_i - g_i) / d_i``.  Enumerating those breakpoints gives the
statistic exactly on the whole search interval, so the minimizer and the
score-inversion region carry no grid error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import inv_normal_cdf
from .errors import (DegenerateScore, DomainError, EmptyInterval, EmptyRegion,
                     IdentificationError, SingularGram, ZeroInstrument)


def score_statistic(alpha, y, d, gfit, vtilde, tau) -> float:
    """``E_n[(1{y <= d alpha + g} - tau) v]^2 / E_n[(1{...} - tau)^2 v^2]``."""
    w = ((y <= d * alpha + gfit) - tau) * vtilde
    num = np.mean(w) ** 2
    if num == 0.0:
        return 0.0
    den = np.mean(w * w)
    if den == 0.0:
        raise DegenerateScore("zero denominator with a nonzero numerator")
    return float(num / den)


@dataclass(frozen=True)
class SearchInterval:
    center: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0 or not math.isfinite(self.radius):
            raise EmptyInterval(f"search radius must be positive, got {self.radius}")

    @property
    def lo(self):
        return self.center - self.radius

    @property
    def hi(self):
        return self.center + self.radius

    @classmethod
    def around(cls, center, d, n=None):
        """Interval ``|alpha - center| <= 10 E_n[d^2]^{-1/2} / log n``."""
        d = np.asarray(d, dtype=float)
        n = d.shape[0] if n is None else n
        md2 = float(np.mean(d ** 2))
        if md2 == 0.0:
            raise IdentificationError("E_n[d^2] = 0: the treatment effect is not identified")
        return cls(float(center), 10.0 / math.sqrt(md2) / math.log(n))


@dataclass(frozen=True)
class ScoreCurve:
    """Exact piecewise-constant ``L_n`` on ``[lo, hi]``.

    ``segment_values[k]`` is the value on the open stretch between
    consecutive breakpoints (the first and last stretches are closed at
    ``lo`` and ``hi``); ``atoms[k]`` is the value at ``breakpoints[k]``.
    Empty stretches carry NaN.
    """

    lo: float
    hi: float
    breakpoints: np.ndarray
    segment_values: np.ndarray
    atoms: np.ndarray
    n: int

    def edges(self):
        return np.concatenate([[self.lo], self.breakpoints, [self.hi]])

    def __call__(self, alpha: float) -> float:
        if not self.lo <= alpha <= self.hi:
            raise DomainError(f"{alpha} lies outside [{self.lo}, {self.hi}]")
        k = int(np.searchsorted(self.breakpoints, alpha))
        if k < self.breakpoints.size and self.breakpoints[k] == alpha:
            return float(self.atoms[k])
        return float(self.segment_values[k])

    def regions(self):
        """Pieces in left-to-right order as ``(left, right, value, is_atom)``."""
        e = self.edges()
        out = []
        for k in range(self.segment_values.size):
            if k > 0:
                b = self.breakpoints[k - 1]
                out.append((b, b, self.atoms[k - 1], True))
            out.append((e[k], e[k + 1], self.segment_values[k], False))
        return out


def build_score_curve(y, d, gfit, vtilde, tau, interval: SearchInterval) -> ScoreCurve:
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    gfit = np.asarray(gfit, dtype=float)
    vtilde = np.asarray(vtilde, dtype=float)
    lo, hi = interval.lo, interval.hi
    nz = d != 0
    bp = (y[nz] - gfit[nz]) / d[nz]
    bp = np.unique(bp[(bp >= lo) & (bp <= hi)])
    edges = np.concatenate([[lo], bp, [hi]])

    def stat(a):
        return score_statistic(a, y, d, gfit, vtilde, tau)

    seg = np.empty(bp.size + 1)
    for k in range(bp.size + 1):
        a, b = edges[k], edges[k + 1]
        seg[k] = np.nan if a == b else stat(0.5 * (a + b))
    atoms = np.array([stat(b) for b in bp])
    return ScoreCurve(lo=lo, hi=hi, breakpoints=bp, segment_values=seg, atoms=atoms,
                      n=int(y.shape[0]))


def minimize_score(y, d, gfit, vtilde, tau, interval: SearchInterval,
                   tie_center: Optional[float] = None):
    """Exact global minimizer of ``L_n`` over the search interval.

    Among tied minimizing pieces the one nearest ``tie_center`` wins; a
    segment containing ``tie_center`` returns it, any other segment returns
    its midpoint.  Returns ``(alpha_check, curve)``.
    """
    c = interval.center if tie_center is None else float(tie_center)
    curve = build_score_curve(y, d, gfit, vtilde, tau, interval)
    pieces = curve.regions()
    vals = np.array([v for _, _, v, _ in pieces])
    best = np.nanmin(vals)
    choice, dist = None, np.inf
    for left, right, v, is_atom in pieces:
        if not v == best:
            continue
        gap = 0.0 if left <= c <= right else min(abs(left - c), abs(right - c))
        if gap < dist:
            choice, dist = (left, right, is_atom), gap
    left, right, is_atom = choice
    if is_atom:
        return float(left), curve
    if left <= c <= right and c not in curve.breakpoints:
        return float(c), curve
    return float(0.5 * (left + right)), curve


@dataclass(frozen=True)
class VarianceEstimates:
    sigma1: float
    sigma2: Optional[float]
    sigma3: float


def variance_estimators(y, d, x, fhat, vtilde, alpha_check, beta_check, support, tau) -> VarianceEstimates:
    """The three plug-in estimates of the asymptotic standard deviation.

    ``sigma2`` is ``None`` when the density-weighted Gram matrix of
    ``(d, x[:, support])`` is singular.
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    x = np.asarray(x, dtype=float)
    f = np.asarray(fhat, dtype=float)
    v = np.asarray(vtilde, dtype=float)
    beta = np.asarray(beta_check, dtype=float)
    mv2 = float(np.mean(v ** 2))
    if mv2 <= 0:
        raise ZeroInstrument("E_n[v^2] = 0")
    s1 = math.sqrt(tau * (1 - tau) / mv2)
    try:
        s2 = _sigma2(d, x, f, support, tau)
    except SingularGram:
        s2 = None
    ind = (y <= d * alpha_check + x @ beta) - tau
    jac = float(np.mean(f * d * v))
    if jac == 0.0:
        raise IdentificationError("E_n[f d v] = 0")
    s3 = math.sqrt(np.mean(ind ** 2 * v ** 2)) / abs(jac)
    return VarianceEstimates(s1, s2, s3)


def _sigma2(d, x, f, support, tau):
    z = np.column_stack([d, x[:, sorted(support)]])
    zw = z * f[:, None]
    gram = zw.T @ zw / z.shape[0]
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise SingularGram("weighted Gram matrix is singular")
    e1 = np.zeros(z.shape[1])
    e1[0] = 1.0
    inv11 = float(np.linalg.solve(gram, e1)[0])
    if inv11 <= 0:
        raise SingularGram("weighted Gram matrix is not positive definite")
    return math.sqrt(tau * (1 - tau) * inv11)


def wald_ci(alpha_check: float, sigma: float, n: int, xi: float = 0.05):
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    if not 0 < xi < 1:
        raise DomainError("xi must lie in (0, 1)")
    half = sigma * inv_normal_cdf(1 - xi / 2) / math.sqrt(n)
    return (alpha_check - half, alpha_check + half)


def chi2_1_quantile(level: float) -> float:
    """Quantile of chi-squared(1) at ``level`` as a squared normal quantile."""
    return inv_normal_cdf(0.5 + level / 2) ** 2


@dataclass(frozen=True)
class InversionRegion:
    lo: float
    hi: float
    is_interval: bool
    threshold: float

    @property
    def length(self):
        return self.hi - self.lo


def inversion_ci(curve: ScoreCurve, n: int, xi: float = 0.05) -> InversionRegion:
    """Hull of ``{alpha in [lo, hi] : n L_n(alpha) <= chi2_1(1 - xi)}``.

    Raises :class:`EmptyRegion` when nothing is accepted.
    """
    c = chi2_1_quantile(1 - xi)
    pieces = [piece for piece in curve.regions() if piece[2] == piece[2]]
    idx = [i for i, piece in enumerate(pieces) if n * piece[2] <= c]
    if not idx:
        raise EmptyRegion("no point of the search interval is accepted")
    contiguous = idx[-1] - idx[0] + 1 == len(idx)
    return InversionRegion(lo=float(pieces[idx[0]][0]), hi=float(pieces[idx[-1]][1]),
                           is_interval=bool(contiguous), threshold=c)


def inversion_accepts(alpha, curve: ScoreCurve, n: int, xi: float = 0.05) -> bool:
    """Whether ``alpha`` belongs to the score-inversion region."""
    if not curve.lo <= alpha <= curve.hi:
        return False
    return n * curve(alpha) <= chi2_1_quantile(1 - xi)


def _uniform_draws(n, B, seed):
    out = np.empty((B, n))
    for b in range(B):
        out[b] = np.random.default_rng([seed, b]).random(n)
    return out


def pivotal_un(vhat, tau: float, B: int = 1000, seed: int = 0) -> np.ndarray:
    """``B`` draws of the pivotal score process at ``tau``.

    Each draw is ``sum_i (tau - 1{U_i <= tau}) v_i / sqrt(n tau (1-tau) E_n[v^2])``
    with fresh uniforms seeded by ``(seed, b)``.
    """
    v = np.asarray(vhat, dtype=float)
    if B < 1:
        raise DomainError("B must be positive")
    mv2 = float(np.mean(v ** 2))
    if mv2 == 0.0:
        raise ZeroInstrument("E_n[v^2] = 0")
    n = v.shape[0]
    u = _uniform_draws(n, B, seed)
    sums = (tau - (u <= tau)) @ v
    return sums / math.sqrt(n * tau * (1 - tau) * mv2)


def uniform_band_critical(draws, xi: float = 0.05) -> float:
    """Empirical (1 - xi)-quantile of ``max_k |U_n(tau, k)|`` over the rows."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    B = draws.shape[0]
    if B < 100:
        raise DomainError("need at least 100 draws")
    sup = np.sort(np.max(np.abs(draws), axis=1))
    k = math.ceil((1 - xi) * B - 1e-9)
    return float(sup[max(k, 1) - 1])


def uniform_bands(alpha_checks, sigmas, n: int, critical: float):
    a = np.asarray(alpha_checks, dtype=float)
    half = np.asarray(sigmas, dtype=float) * critical / math.sqrt(n)
    return np.column_stack([a - half, a + half])


@dataclass
class InferenceReport:
    method: str
    tau: float
    n: int
    p: int
    alpha_check: float
    se: float
    sigma_choice: str
    sigma1: float
    sigma2: Optional[float]
    sigma3: float
    ci_wald: tuple
    ci_inversion: Optional[tuple]
    inversion_is_interval: Optional[bool]
    ln_at_estimate: Optional[float]
    supports: dict
    fhat_summary: dict
    resolved: dict
    seed: int
    alpha_tilde: Optional[float] = None
    xi: float = 0.05
    timings: dict = field(default_factory=dict, compare=False)
    curve: Optional[ScoreCurve] = field(default=None, repr=False, compare=False)

    def covers(self, alpha, region="wald"):
        if region == "wald":
            lo, hi = self.ci_wald
            return lo <= alpha <= hi
        if self.curve is None:
            return False
        return inversion_accepts(alpha, self.curve, self.n, self.xi)

    def to_dict(self, include_timings=False):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__
               if k not in ("curve", "timings")}
        if include_timings:
            out["timings"] = dict(self.timings)
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
