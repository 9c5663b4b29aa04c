"""Mortality curve, discounting, and the multi-insurer premium market.

The hazard and discount curves are deterministic maps of time.  Their
cumulative integrals are precomputed once on a fine grid with per-interval
Simpson quadrature (error far below the 1e-10 documented tolerance for smooth
curves) and queried by local Simpson on the partial interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import RejectedInput

__all__ = [
    "ActuarialModel",
    "InsuranceMarket",
    "survival_probability",
    "death_density",
    "select_insurer",
    "legacy",
]

_CACHE_INTERVALS = 10_000


class _CumulativeIntegral:
    """Cumulative integral of a smooth rate map on [0, T] (composite Simpson)."""

    def __init__(self, fn: Callable, horizon: float, intervals: int = _CACHE_INTERVALS):
        self.fn = fn
        self.h = horizon / intervals
        self.nodes = np.linspace(0.0, horizon, intervals + 1)
        vals = np.array([float(fn(t)) for t in self.nodes])
        mids = np.array([float(fn(t)) for t in self.nodes[:-1] + 0.5 * self.h])
        pieces = (self.h / 6.0) * (vals[:-1] + 4.0 * mids + vals[1:])
        self.cum = np.concatenate([[0.0], np.cumsum(pieces)])
        self.node_values = vals

    def __call__(self, t: float) -> float:
        k = min(int(t / self.h), self.nodes.size - 2)
        t0 = self.nodes[k]
        if t <= t0:
            return float(self.cum[k])
        dt = t - t0
        partial = (dt / 6.0) * (
            self.node_values[k] + 4.0 * float(self.fn(t0 + 0.5 * dt)) + float(self.fn(t))
        )
        return float(self.cum[k] + partial)


@dataclass
class ActuarialModel:
    """Force of mortality lam(t), discount rate rho(t), and horizon T.

    Both cumulative integrals are cached at construction, so instances are
    safe to share across concurrent workers afterwards.
    """

    lam: Callable
    rho: Callable
    horizon: float

    def __post_init__(self):
        if self.horizon <= 0:
            raise RejectedInput("horizon must be positive")
        self._cum_lambda = _CumulativeIntegral(self.lam, self.horizon)
        self._cum_rho = _CumulativeIntegral(self.rho, self.horizon)
        lam_vals = self._cum_lambda.node_values
        rho_vals = self._cum_rho.node_values
        if np.any(lam_vals < 0):
            raise RejectedInput("force of mortality must be nonnegative on [0, T]")
        if np.any(rho_vals <= 0):
            raise RejectedInput("discount rate must be positive on [0, T]")

    def _check_time(self, t: float):
        if not (0.0 <= t <= self.horizon + 1e-12):
            raise RejectedInput(f"t={t} outside [0, {self.horizon}]")

    def cumulative_hazard(self, t: float) -> float:
        self._check_time(t)
        return self._cum_lambda(min(t, self.horizon))

    def cumulative_discount(self, t: float) -> float:
        self._check_time(t)
        return self._cum_rho(min(t, self.horizon))

    def cumulative_rho_lambda(self, t: float) -> float:
        """Integral of rho + lam over [0, t]."""
        return self.cumulative_discount(t) + self.cumulative_hazard(t)


def survival_probability(am: ActuarialModel, t: float) -> float:
    """Probability of surviving beyond t, exp(-integral of lam over [0, t])."""
    return math.exp(-am.cumulative_hazard(t))


def death_density(am: ActuarialModel, t: float) -> float:
    """Density of the death time at t: lam(t) times the survival probability."""
    am._check_time(t)
    return float(am.lam(t)) * survival_probability(am, t)


@dataclass
class InsuranceMarket:
    """Premium-payout ratio curves of the M insurers.

    Ties in :func:`select_insurer` resolve to the smallest index and bump
    ``tie_count`` (distinct contracts should make ties measure zero, but a
    finite grid can still hit them).
    """

    etas: Sequence[Callable]
    tie_count: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.etas) < 1:
            raise RejectedInput("at least one insurer is required")

    @property
    def n_insurers(self) -> int:
        return len(self.etas)

    def eta_values(self, t: float) -> np.ndarray:
        vals = np.array([float(eta(t)) for eta in self.etas])
        if np.any(vals <= 0):
            raise RejectedInput(f"premium-payout ratios must be positive at t={t}")
        return vals

    def check_distinct(self, t_grid: Sequence[float], tol: float = 1e-12):
        """Fraction of sampled times at which some pair of curves coincides."""
        hits = 0
        for t in t_grid:
            vals = self.eta_values(t)
            diffs = np.abs(vals[:, None] - vals[None, :])
            np.fill_diagonal(diffs, np.inf)
            if diffs.min() <= tol:
                hits += 1
        return hits / max(len(t_grid), 1)


def select_insurer(im: InsuranceMarket, t: float) -> int:
    """Index (0-based) of the insurer with the smallest ratio at time t."""
    vals = im.eta_values(t)
    best = int(np.argmin(vals))
    if np.sum(vals == vals[best]) > 1:
        im.tie_count += 1
    return best


def legacy(x: float, p: Sequence[float], im: InsuranceMarket, t: float) -> float:
    """Wealth plus total insurance payout: x + sum of p_n / eta_n(t)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (im.n_insurers,):
        raise RejectedInput(f"premium vector must have length {im.n_insurers}")
    if np.any(p < 0):
        raise RejectedInput("premiums must be nonnegative")
    return float(x + np.sum(p / im.eta_values(t)))
