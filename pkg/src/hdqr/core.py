"""Shared data model, check-loss primitives and design diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, DomainError, EmptySupport, ZeroColumn


def _frozen(a, ndim):
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Outcome ``y``, treatment ``d`` and technical regressors ``x`` (n x p).

    Column 0 of ``x`` may be an intercept of ones.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    column_names: Optional[tuple] = None

    def __post_init__(self):
        y = _frozen(self.y, 1)
        d = _frozen(self.d, 1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x = _frozen(x, 2)
        n = y.shape[0]
        if n < 2:
            raise DimensionError("need at least two observations")
        if d.shape[0] != n or x.shape[0] != n:
            raise DimensionError(
                f"row counts disagree: y {n}, d {d.shape[0]}, x {x.shape[0]}")
        if x.shape[1] < 1:
            raise DimensionError("need at least one regressor")
        for name, arr in (("y", y), ("d", d), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} contains non-finite values")
        names = self.column_names
        if names is not None:
            names = tuple(str(s) for s in names)
            if len(names) != x.shape[1]:
                raise DimensionError("column_names length must equal p")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class StandardizedDesign:
    x_std: np.ndarray
    scale: np.ndarray
    intercept_col: Optional[int] = None

    def to_original(self, coef_std):
        """Map coefficients on standardized columns back to original units."""
        return np.asarray(coef_std, dtype=float) / self.scale

    def to_standardized(self, coef):
        return np.asarray(coef, dtype=float) * self.scale


def standardize(data) -> StandardizedDesign:
    """Rescale every column of ``x`` to unit mean square.

    Accepts a :class:`Dataset` or a bare matrix.
    """
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    rms = np.sqrt(np.mean(x ** 2, axis=0))
    bad = np.flatnonzero(rms < 1e-14)
    if bad.size:
        raise ZeroColumn(f"column(s) {bad.tolist()} have zero root-mean-square")
    intercept = None
    ones = np.flatnonzero(np.all(x == 1.0, axis=0))
    if ones.size:
        intercept = int(ones[0])
        rms[ones] = 1.0
    x_std = x / rms
    x_std.setflags(write=False)
    rms.setflags(write=False)
    return StandardizedDesign(x_std=x_std, scale=rms, intercept_col=intercept)


def check_loss(t, tau):
    """Quantile check loss ``t * (tau - 1{t <= 0})``; works elementwise."""
    t = np.asarray(t, dtype=float)
    out = t * (tau - (t <= 0))
    return float(out) if out.ndim == 0 else out


def score_fn(t1, t2, tau):
    """Quantile score ``tau - 1{t1 <= t2}``."""
    out = tau - (np.asarray(t1) <= np.asarray(t2))
    return float(out) if np.ndim(out) == 0 else out


_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def _lower_quantile(q):
    # q <= 0.5; rational start then one Halley step on erfc
    if q < 0.02425:
        r = math.sqrt(-2.0 * math.log(q))
        x = (((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]) / \
            ((((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0)
    else:
        s = q - 0.5
        r = s * s
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * s / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - q
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def inv_normal_cdf(q: float) -> float:
    """Standard normal quantile function."""
    q = float(q)
    if not 0.0 < q < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {q}")
    if q == 0.5:
        return 0.0
    if q > 0.5:
        return -_lower_quantile(1.0 - q)
    return _lower_quantile(q)


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


@dataclass(frozen=True)
class SparseCoef:
    values: np.ndarray
    support: tuple = field(default=())

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "support", tuple(int(j) for j in np.flatnonzero(v)))

    @classmethod
    def zeros(cls, p):
        return cls(np.zeros(p))

    def __len__(self):
        return self.values.shape[0]


def truncate_top_k(beta, k: int) -> SparseCoef:
    """Keep the ``k`` largest entries of ``beta`` in magnitude.

    Ties at the cut are resolved in favour of the lower index.
    """
    if k < 0:
        raise DomainError("k must be nonnegative")
    values = beta.values if isinstance(beta, SparseCoef) else np.asarray(beta, float)
    if np.count_nonzero(values) <= k:
        return SparseCoef(values)
    order = np.argsort(-np.abs(values), kind="stable")
    out = np.zeros_like(values)
    keep = order[:k]
    out[keep] = values[keep]
    return SparseCoef(out)


@dataclass(frozen=True)
class EigDiagnostics:
    m: int
    phi_min: float
    phi_max: float
    exact: bool


def sparse_eigs(gram, m: int, budget: int = 20000, seed: int = 0) -> EigDiagnostics:
    """Minimal and maximal m-sparse eigenvalues of a PSD matrix.

    Exhaustive over all m-subsets when there are at most ``budget`` of them;
    otherwise greedy forward selection plus ``budget`` random subsets, which
    gives phi_min from above and phi_max from below.
    """
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    if gram.shape != (p, p):
        raise DimensionError("gram must be square")
    if m > p:
        raise DimensionError(f"sparsity level m={m} exceeds dimension p={p}")
    if m < 1:
        raise DomainError("m must be at least 1")

    # extreme eigenvalues over subsets of size <= m are attained at size m (interlacing)
    if math.comb(p, m) <= budget:
        lo, hi = np.inf, -np.inf
        subsets = np.array(list(combinations(range(p), m)))
        for chunk in np.array_split(subsets, max(1, len(subsets) // 2048)):
            sub = gram[chunk[:, :, None], chunk[:, None, :]]
            ev = np.linalg.eigvalsh(sub)
            lo = min(lo, ev[:, 0].min())
            hi = max(hi, ev[:, -1].max())
        return EigDiagnostics(m, max(float(lo), 0.0), float(hi), True)

    def greedy(sign):
        chosen = []
        rest = list(range(p))
        best = None
        for _ in range(m):
            vals = []
            for j in rest:
                idx = chosen + [j]
                ev = np.linalg.eigvalsh(gram[np.ix_(idx, idx)])
                vals.append(ev[0] if sign < 0 else ev[-1])
            vals = np.asarray(vals)
            pick = int(np.argmin(vals) if sign < 0 else np.argmax(vals))
            best = float(vals[pick])
            chosen.append(rest.pop(pick))
        return best

    lo = greedy(-1)
    hi = greedy(+1)
    rng = np.random.default_rng(seed)
    for _ in range(budget // 64 + 1):
        idx = np.array([rng.choice(p, size=m, replace=False) for _ in range(64)])
        ev = np.linalg.eigvalsh(gram[idx[:, :, None], idx[:, None, :]])
        lo = min(lo, float(ev[:, 0].min()))
        hi = max(hi, float(ev[:, -1].max()))
    return EigDiagnostics(m, max(lo, 0.0), hi, False)


def _project_l1_ball(v, radius):
    if radius <= 0:
        return np.zeros_like(v)
    a = np.abs(v)
    if a.sum() <= radius:
        return v
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    rho = np.nonzero(u * k > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def restricted_eig(gram, support_T: Sequence[int], cbar: float,
                   n_starts: int = 20, n_iter: int = 500, seed: int = 0) -> float:
    """Heuristic value of the restricted eigenvalue over the cone
    ``||delta_{T^c}||_1 <= cbar ||delta_T||_1``.

    Projected gradient on ``delta' G delta`` with ``||delta_T|| = 1``,
    started from several random points; the returned number is the smallest
    ``sqrt(delta' G delta)`` reached. It is a diagnostic only.
    """
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    T = np.array(sorted(set(int(j) for j in support_T)), dtype=int)
    if T.size == 0:
        raise EmptySupport("restricted eigenvalue needs a nonempty support")
    if cbar < 0:
        raise DomainError("cbar must be nonnegative")
    Tc = np.setdiff1d(np.arange(p), T)
    step = 1.0 / max(np.linalg.eigvalsh(gram)[-1], 1e-12)
    rng = np.random.default_rng(seed)

    def feasible(delta):
        dt = delta[T]
        nrm = np.linalg.norm(dt)
        if nrm == 0:
            dt = np.zeros_like(dt)
            dt[0] = 1.0
            nrm = 1.0
        delta = delta.copy()
        delta[T] = dt / nrm
        if Tc.size:
            delta[Tc] = _project_l1_ball(delta[Tc] / nrm, cbar * np.abs(delta[T]).sum())
        return delta

    best = np.inf
    for s in range(n_starts):
        delta = np.zeros(p)
        delta[T] = rng.standard_normal(T.size)
        if s > 0 and Tc.size:
            delta[Tc] = rng.standard_normal(Tc.size)
        delta = feasible(delta)
        val = delta @ gram @ delta
        for _ in range(n_iter):
            cand = feasible(delta - step * (gram @ delta))
            cval = cand @ gram @ cand
            if cval > val - 1e-14:
                break
            delta, val = cand, cval
        best = min(best, val)
    return float(math.sqrt(max(best, 0.0)))


def design_gram(data: Dataset, include_treatment: bool = True) -> np.ndarray:
    """Empirical Gram matrix of the standardized design, optionally with the
    treatment (scaled to unit mean square) as the leading column."""
    x = standardize(data).x_std
    if include_treatment:
        d = data.d / math.sqrt(max(np.mean(data.d ** 2), 1e-300))
        x = np.column_stack([d, x])
    return x.T @ x / x.shape[0]
