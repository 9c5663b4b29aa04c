"""Closed-form oracle for the linear pure-jump model with an
Ornstein-Uhlenbeck factor.

The asset carries no diffusion, a single Poisson jump stream with
factor-proportional dispersion, and a zero-rate bond; hazard, discount and
premium ratios are constants and all utility weights are one.  In this
setting the portfolio weight has two printed closed forms that disagree in
their leading factor; the bisection-solved stationarity root is the
internally consistent one and is what the generic solver must reproduce.
Both are exposed so comparison output can show them side by side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actuarial import ActuarialModel, InsuranceMarket
from .errors import NoInteriorSolution, RejectedInput
from .market import (
    CoefficientSet,
    FactorDynamics,
    JumpSpec,
    affine_y_map,
    constant_map,
    constant_rate,
    gamma_mark_times_factor,
)
from .mc import NoiseBank, PathBundle, simulate_factor, simulate_wealth
from .strategy import Preferences, StrategyRule

__all__ = [
    "OUParams",
    "ou_components",
    "ou_exact_factor",
    "ou_paper_portfolio",
    "ou_foc_portfolio",
    "ou_adjoint_a1",
    "A1Estimate",
]


@dataclass(frozen=True)
class OUParams:
    """Constant parameters of the pure-jump factor model (unit utility weights)."""

    alpha0: float
    alpha1: float
    gamma: float
    nu: float
    b: float
    y0: float
    lam: float
    rho: float
    eta: float
    delta: float
    horizon: float = 1.0

    def __post_init__(self):
        if self.b <= 0:
            raise RejectedInput("mean reversion must be positive")
        if self.nu <= 0:
            raise RejectedInput("jump intensity must be positive")
        for name in ("lam", "rho", "eta"):
            if getattr(self, name) <= 0:
                raise RejectedInput(f"{name} must be positive")
        if self.delta == 0.0 or self.delta >= 1.0:
            raise RejectedInput("delta must lie in (-inf, 1) excluding 0")


def ou_components(params: OUParams):
    """Scenario objects matching the oracle model: zero rate, no diffusion,
    single unit-mark jump atom with dispersion gamma * y."""
    prefs = Preferences(delta=params.delta, kappa1=1.0, kappa2=1.0, kappa3=1.0)
    am = ActuarialModel(lam=constant_rate(params.lam), rho=constant_rate(params.rho),
                        horizon=params.horizon)
    im = InsuranceMarket(etas=[constant_rate(params.eta)])
    cs = CoefficientSet(
        r=constant_rate(0.0),
        alpha=affine_y_map(params.alpha0, params.alpha1),
        beta=constant_map(0.0),
        sigma=constant_map(0.0),
        gamma=gamma_mark_times_factor(params.gamma),
        jumps=JumpSpec(rate=params.nu, atoms=((1.0, 1.0),)),
    )
    fd = FactorDynamics(
        g=lambda y: -params.b * np.asarray(y, dtype=np.float64) if np.ndim(y) else -params.b * y,
        g_lipschitz_bound=params.b,
        g_derivative_bound=params.b,
        domain=(params.y0 - 6.0, params.y0 + 6.0),
    )
    return prefs, am, im, cs, fd


def ou_exact_factor(
    params: OUParams,
    t_grid: np.ndarray,
    rng: np.random.Generator,
    n_paths: int = 1,
    zero_noise: bool = False,
) -> np.ndarray:
    """Exact Gaussian-transition sampling of the mean-reverting factor.

    Returns an (n_paths, len(t_grid)) array.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    normals = rng.standard_normal((n_paths, t_grid.size - 1))
    _, _, _, _, fd = ou_components(params)
    return simulate_factor(fd, params.y0, t_grid, normals, mode="exact", ou_rate=params.b)


def ou_paper_portfolio(params: OUParams, y: float) -> float:
    """Literal evaluation of the printed closed form with its 1/delta prefactor."""
    gy = params.gamma * params.nu * y
    if gy == 0.0:
        raise RejectedInput("gamma * nu * y must be nonzero")
    ratio = (gy - params.alpha0 - params.alpha1 * y) / gy
    if ratio <= 0.0:
        raise RejectedInput(f"nonpositive ratio {ratio:.6g} in the printed formula")
    return (ratio ** (1.0 / (params.delta - 1.0)) - 1.0) / params.delta


def ou_foc_portfolio(params: OUParams, y: float, bracket: tuple = (-5.0, 400.0)) -> float:
    """Bisection root of the jump-only stationarity condition

        mu(y) + gamma*y*nu * ((1 + pi*gamma*y)**(delta-1) - 1) = 0,

    the internally consistent weight the generic solver must match.
    """
    gy = params.gamma * y
    mu = params.alpha0 + params.alpha1 * y
    delta = params.delta

    def f(pi):
        return mu + gy * params.nu * ((1.0 + pi * gy) ** (delta - 1.0) - 1.0)

    lo, hi = bracket
    if gy > 0:
        lo = max(lo, -1.0 / gy + 1e-12 * (1.0 + 1.0 / gy))
    elif gy < 0:
        hi = min(hi, -1.0 / gy - 1e-12 * (1.0 - 1.0 / gy))
    else:
        raise RejectedInput("gamma * y must be nonzero")
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if f_lo * f_hi > 0:
        raise NoInteriorSolution("jump-only FOC has no root in bracket", lo, hi, f_lo, f_hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (f_lo > 0):
            lo, f_lo = mid, fm
        else:
            hi = mid
        if hi - lo < 1e-13 * (1.0 + abs(mid)):
            break
    return 0.5 * (lo + hi)


@dataclass
class A1Estimate:
    x_t: float
    y_t: float
    estimate: float
    stderr: float
    candidate_scale: float  # multiply the estimate by this for the hazard-included terminal


def ou_adjoint_a1(
    params: OUParams,
    rule: StrategyRule,
    t: float,
    n_outer: int,
    n_inner: int,
    seed: int,
    x0: float = 1.0,
    outer_steps: int = 200,
    inner_steps: int = 200,
    terminal_discount: str = "rho",
) -> list:
    """Nested Monte Carlo estimate of the marginal value of wealth at time t.

    Outer paths carry the state to t under ``rule``; inner continuations then
    estimate ``exp(-rho*T) * E[exp(eta*(T-t)) * X(T)**(delta-1) | state]``.
    ``terminal_discount='rho_plus_lambda'`` additionally discounts the
    cumulative hazard at the horizon, matching the candidate built from the
    solved grid; the default keeps the printed rho-only form and reports the
    conversion factor alongside.
    """
    if not (0.0 <= t <= params.horizon):
        raise RejectedInput("t must lie in [0, horizon]")
    prefs, am, im, cs, fd = ou_components(params)
    delta = params.delta
    disc = np.exp(-params.rho * params.horizon)
    if terminal_discount == "rho_plus_lambda":
        disc *= np.exp(-params.lam * params.horizon)
    elif terminal_discount != "rho":
        raise RejectedInput(f"unknown terminal discount {terminal_discount!r}")
    scale = np.exp(-params.lam * params.horizon) if terminal_discount == "rho" else 1.0

    # outer leg: states at t
    if t > 0:
        outer_grid = np.linspace(0.0, t, outer_steps + 1)
        bank = NoiseBank(outer_grid, cs.jumps, n_outer, seed)
        z1, z2, counts = bank.chunk(0, n_outer)
        y_paths = simulate_factor(fd, params.y0, outer_grid, z1, mode="exact", ou_rate=params.b)
        dts = np.diff(outer_grid)
        bundle = PathBundle(t_grid=outer_grid, w1=z1 * np.sqrt(dts), w2=z2 * np.sqrt(dts),
                            jump_counts=counts, marks=cs.jumps.marks, y=y_paths)
        bundle = simulate_wealth(cs, am, im, rule, x0, bundle, keep_controls=False)
        states = [(float(bundle.x[i, -1]), float(bundle.y[i, -1]))
                  for i in range(n_outer) if not bundle.flagged[i]]
    else:
        states = [(x0, params.y0)]

    growth = np.exp(params.eta * (params.horizon - t))
    out = []
    for idx, (x_t, y_t) in enumerate(states):
        if params.horizon - t <= 0:
            est = disc * x_t ** (delta - 1.0)
            out.append(A1Estimate(x_t, y_t, float(est), 0.0, float(scale)))
            continue
        inner_grid = np.linspace(t, params.horizon, inner_steps + 1)
        inner_bank = NoiseBank(inner_grid, cs.jumps, n_inner, seed + 90001 + idx)
        z1, z2, counts = inner_bank.chunk(0, n_inner)
        y_inner = simulate_factor(fd, y_t, inner_grid, z1, mode="exact", ou_rate=params.b)
        dts = np.diff(inner_grid)
        inner = PathBundle(t_grid=inner_grid, w1=z1 * np.sqrt(dts), w2=z2 * np.sqrt(dts),
                           jump_counts=counts, marks=cs.jumps.marks, y=y_inner)
        inner = simulate_wealth(cs, am, im, rule, x_t, inner, keep_controls=False)
        keep = ~inner.flagged
        vals = disc * growth * inner.x[keep, -1] ** (delta - 1.0)
        est = float(vals.mean())
        se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        out.append(A1Estimate(x_t, y_t, est, se, float(scale)))
    return out
