"""Conditional density at the tau-quantile from differenced quantile fits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import DomainError, MissingQuantile

FIRST_ORDER = 1
SECOND_ORDER = 2


@dataclass(frozen=True)
class DensityConfig:
    order: int = FIRST_ORDER
    h: Optional[float] = None
    trim_floor: float = 1e-4
    f_max_cap: Optional[float] = None
    cap_ratio: Optional[float] = None

    def __post_init__(self):
        if self.order not in (FIRST_ORDER, SECOND_ORDER):
            raise DomainError(f"order must be 1 or 2, got {self.order}")
        if self.h is not None and self.h <= 0:
            raise DomainError("bandwidth must be positive")
        if self.trim_floor <= 0:
            raise DomainError("trim_floor must be positive")
        if self.cap_ratio is not None and self.cap_ratio < 1:
            raise DomainError("cap_ratio must be at least 1")

    def resolve_h(self, n: int, tau: float) -> float:
        h = default_bandwidth(n, tau) if self.h is None else self.h
        check_indices(tau, h, self.order)
        return h


@dataclass(frozen=True)
class DensityEstimate:
    fhat: np.ndarray
    trimmed_count: int
    trimmed: np.ndarray
    h: float
    order: int
    quantile_fits: Optional[dict] = None


def default_bandwidth(n: int, tau: float) -> float:
    """``min(n^{-1/6}, tau (1 - tau) / 2)``."""
    if n < 2:
        raise DomainError("need n >= 2")
    return min(n ** (-1.0 / 6.0), tau * (1.0 - tau) / 2.0)


def quantile_indices(tau: float, h: float, order: int) -> list:
    us = [tau - h, tau + h]
    if order == SECOND_ORDER:
        us = [tau - 2 * h] + us + [tau + 2 * h]
    return us


def check_indices(tau: float, h: float, order: int) -> None:
    for u in quantile_indices(tau, h, order):
        if not 0.0 < u < 1.0:
            raise DomainError(
                f"bandwidth h={h} puts quantile index {u:.6g} outside (0, 1) for order {order}")


def _lookup(preds, u, h):
    for key, val in preds.items():
        if abs(key - u) <= 1e-12 * max(1.0, h):
            return np.asarray(val, dtype=float)
    raise MissingQuantile(f"no quantile prediction for index {u:.10g}")


def estimate_density(quantile_predictions: Mapping[float, np.ndarray], tau: float,
                     config: DensityConfig, h: Optional[float] = None,
                     quantile_fits=None) -> DensityEstimate:
    """Density weights from predicted conditional quantiles.

    First order: ``2h / (Q(tau+h) - Q(tau-h))``.  Second order:
    ``h / (2/3 (Q(tau+h) - Q(tau-h)) - 1/12 (Q(tau+2h) - Q(tau-2h)))``, the
    fourth-order central difference.
    Denominators below ``trim_floor * h`` (including crossings) are raised to
    that floor and counted as trimmed.  ``f_max_cap`` caps the result at a
    fixed level and ``cap_ratio`` at that multiple of the median estimate;
    capped entries also count as trimmed.
    """
    if h is None:
        if config.h is None:
            raise DomainError("bandwidth not given")
        h = config.h
    check_indices(tau, h, config.order)
    up = _lookup(quantile_predictions, tau + h, h)
    lo = _lookup(quantile_predictions, tau - h, h)
    if config.order == FIRST_ORDER:
        num = 2.0 * h
        den = up - lo
    else:
        up2 = _lookup(quantile_predictions, tau + 2 * h, h)
        lo2 = _lookup(quantile_predictions, tau - 2 * h, h)
        num = h
        den = (2.0 / 3.0) * (up - lo) - (up2 - lo2) / 12.0
    floor = config.trim_floor * h
    trimmed = ~(den >= floor)
    fhat = num / np.where(trimmed, floor, den)
    caps = []
    if config.f_max_cap is not None:
        caps.append(config.f_max_cap)
    if config.cap_ratio is not None:
        caps.append(config.cap_ratio * float(np.median(fhat)))
    if caps:
        cap = min(caps)
        trimmed = trimmed | (fhat > cap)
        fhat = np.minimum(fhat, cap)
    return DensityEstimate(
        fhat=fhat,
        trimmed_count=int(trimmed.sum()),
        trimmed=trimmed,
        h=float(h),
        order=config.order,
        quantile_fits=quantile_fits,
    )
