"""CRRA preferences, optimal feedback controls, and the pointwise Hamiltonian.

The consumption and premium controls are closed-form in the marginal value of
wealth; the portfolio weight is the root of a scalar first-order condition
whose jump integral is an exact atom sum.  All feedback rules produced here
are linear in wealth, which later lets the wealth equation be written as a
stochastic exponential.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .actuarial import ActuarialModel, InsuranceMarket, select_insurer
from .errors import NoInteriorSolution, RejectedInput
from .market import CoefficientSet, FactorDynamics

__all__ = [
    "Preferences",
    "AdjointState",
    "StrategyRule",
    "PortfolioSolution",
    "utility",
    "marginal_utility",
    "inverse_marginal",
    "optimal_consumption",
    "optimal_premium",
    "portfolio_foc_residual",
    "portfolio_foc_residual_h_form",
    "solve_portfolio",
    "hamiltonian",
    "hamiltonian_dpi",
    "portfolio_foc_y_residual",
    "make_optimal_rule",
    "shift_pi",
    "scale_consumption",
    "premium_off",
]


@dataclass(frozen=True)
class Preferences:
    """CRRA exponent and the three utility weights (consumption, legacy, terminal)."""

    delta: float
    kappa1: float = 1.0
    kappa2: float = 1.0
    kappa3: float = 1.0

    def __post_init__(self):
        if self.delta == 0.0 or self.delta >= 1.0:
            raise RejectedInput("delta must lie in (-inf, 1) excluding 0")
        if min(self.kappa1, self.kappa2, self.kappa3) <= 0:
            raise RejectedInput("utility weights must be positive")

    def kappa(self, which: int) -> float:
        try:
            return (self.kappa1, self.kappa2, self.kappa3)[which - 1]
        except IndexError:
            raise RejectedInput(f"utility index must be 1, 2 or 3, got {which}") from None


@dataclass
class AdjointState:
    """Costate values at one evaluation point.

    ``d1`` and ``d2`` hold the jump components per atom, aligned with the
    scenario's jump marks.
    """

    a1: float
    b1: float = 0.0
    b2: float = 0.0
    d1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    a2: float = 0.0
    b3: float = 0.0
    b4: float = 0.0
    d2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.d1 = np.asarray(self.d1, dtype=np.float64)
        self.d2 = np.asarray(self.d2, dtype=np.float64)
        vals = [self.a1, self.b1, self.b2, self.a2, self.b3, self.b4]
        if not (np.isfinite(vals).all() and np.isfinite(self.d1).all() and np.isfinite(self.d2).all()):
            raise RejectedInput("adjoint components must be finite")


# ---------------------------------------------------------------------------
# utilities and their inverses
# ---------------------------------------------------------------------------

def utility(prefs: Preferences, which: int, x: float) -> float:
    """Power utility kappa * x**delta / delta."""
    kappa, delta = prefs.kappa(which), prefs.delta
    if x < 0 or (x == 0 and delta < 0):
        raise RejectedInput(f"utility undefined at x={x} for delta={delta}")
    if x == 0:
        return 0.0
    return kappa * x ** delta / delta


def marginal_utility(prefs: Preferences, which: int, x: float) -> float:
    kappa, delta = prefs.kappa(which), prefs.delta
    if x <= 0:
        raise RejectedInput("marginal utility requires x > 0")
    return kappa * x ** (delta - 1.0)


def inverse_marginal(prefs: Preferences, which: int, y: float) -> float:
    """Inverse of the marginal utility: (y / kappa) ** (1 / (delta - 1))."""
    if y <= 0:
        raise RejectedInput("inverse marginal utility requires y > 0")
    return (y / prefs.kappa(which)) ** (1.0 / (prefs.delta - 1.0))


# ---------------------------------------------------------------------------
# optimal consumption and premium
# ---------------------------------------------------------------------------

def optimal_consumption(prefs: Preferences, am: ActuarialModel, t: float, a1: float) -> float:
    """Consumption rate maximizing the discounted running reward given the
    marginal value of wealth ``a1``."""
    if a1 <= 0:
        raise RejectedInput("marginal value of wealth must be positive")
    expo = 1.0 / (prefs.delta - 1.0)
    return (a1 / prefs.kappa1) ** expo * np.exp(expo * am.cumulative_rho_lambda(t))


def optimal_premium(
    prefs: Preferences,
    am: ActuarialModel,
    im: InsuranceMarket,
    t: float,
    x: float,
    a1: float,
):
    """Premium vector and Kuhn-Tucker multipliers at one evaluation point.

    Only the cheapest insurer can carry a nonzero premium; the multipliers
    satisfy complementary slackness exactly and the stationarity equations to
    floating-point accuracy.
    """
    if x < 0:
        raise RejectedInput("wealth must be nonnegative")
    if a1 <= 0:
        raise RejectedInput("marginal value of wealth must be positive")
    lam = float(am.lam(t))
    if lam == 0.0:
        raise RejectedInput("insurance undefined: zero hazard rate divides the payout")

    etas = im.eta_values(t)
    n_star = select_insurer(im, t)
    eta = etas[n_star]
    expo = 1.0 / (prefs.delta - 1.0)
    cum = am.cumulative_rho_lambda(t)
    target_legacy = (eta * a1 / (prefs.kappa2 * lam)) ** expo * np.exp(expo * cum)

    p = np.zeros(im.n_insurers)
    p[n_star] = max(0.0, eta * (target_legacy - x))

    achieved_legacy = x + p[n_star] / eta
    xi = a1 - (lam / etas) * np.exp(-cum) * marginal_utility(prefs, 2, achieved_legacy)
    if p[n_star] > 0.0:
        xi[n_star] = 0.0  # exact complementary slackness at the interior solution
    return p, xi


# ---------------------------------------------------------------------------
# portfolio first-order condition
# ---------------------------------------------------------------------------

def _residual_core(delta, mu, vol2, gammas, weights, pi, beta_h_y):
    """Stationarity residual; broadcasts over trailing axes.

    ``gammas`` has shape (n_atoms,) + base_shape, ``weights`` shape (n_atoms,).
    Increasing in pi (the Hamiltonian is strictly concave in the weight).
    """
    jump = 0.0
    if weights.size:
        factors = 1.0 + pi * gammas
        jump = np.einsum("a,a...->...", weights, (1.0 - factors ** (delta - 1.0)) * gammas)
    return beta_h_y - mu + (1.0 - delta) * vol2 * pi + jump


def portfolio_foc_residual(
    prefs: Preferences,
    cs: CoefficientSet,
    t: float,
    y: float,
    pi: float,
    h_y: float,
) -> float:
    """Residual of the portfolio stationarity condition at weight ``pi``."""
    mu = cs.mu(t, y)
    beta = cs.beta(t, y)
    sigma = cs.sigma(t, y)
    gammas = cs.gamma_atoms(t, y)
    for z, g in zip(cs.jumps.marks, gammas):
        if 1.0 + pi * g <= 0.0:
            raise RejectedInput(
                f"inadmissible weight: 1 + pi*gamma = {1.0 + pi * g:.6g} at atom z={z}"
            )
    return float(_residual_core(
        prefs.delta, mu, beta ** 2 + sigma ** 2, gammas, cs.jumps.weights, pi, beta * h_y
    ))


def portfolio_foc_residual_h_form(
    prefs: Preferences,
    cs: CoefficientSet,
    t: float,
    y: float,
    pi: float,
    h_y: float,
    h: float,
) -> float:
    """Variant with the stationarity bracket scaled by ``h`` (diagnostic only;
    shares its roots with :func:`portfolio_foc_residual` whenever the
    volatility-times-slope term vanishes)."""
    plain = portfolio_foc_residual(prefs, cs, t, y, pi, h_y)
    beta_h_y = cs.beta(t, y) * h_y
    return float(beta_h_y - (beta_h_y - plain) * h)


def admissible_bracket(jumps, t, y, gamma_fn, lo=-5.0, hi=5.0):
    """Intersect [lo, hi] with the region where every jump factor stays positive."""
    for z in jumps.marks:
        g = float(gamma_fn(t, y, z))
        if g > 0:
            lo = max(lo, -1.0 / g + 1e-9 * (1.0 + 1.0 / g))
        elif g < 0:
            hi = min(hi, -1.0 / g - 1e-9 * (1.0 - 1.0 / g))
    if lo >= hi:
        raise RejectedInput("empty admissible bracket for the portfolio weight")
    return lo, hi


@dataclass
class PortfolioSolution:
    pi: float
    residual: float
    bracket: tuple
    in_unit_interval: bool
    second_derivative: float


def solve_portfolio(
    prefs: Preferences,
    cs: CoefficientSet,
    t: float,
    y: float,
    h_y: float,
    bracket: tuple = (-5.0, 5.0),
) -> PortfolioSolution:
    """Root of the portfolio first-order condition, with diagnostics.

    The residual is strictly monotone in ``pi`` on the admissible bracket, so
    a sign change pins the root; its absence raises
    :class:`NoInteriorSolution` carrying the boundary residuals.
    """
    lo, hi = admissible_bracket(cs.jumps, t, y, cs.gamma, *bracket)
    res = lambda p: portfolio_foc_residual(prefs, cs, t, y, p, h_y)
    res_lo, res_hi = res(lo), res(hi)
    if res_lo == 0.0:
        pi = lo
    elif res_hi == 0.0:
        pi = hi
    elif res_lo * res_hi > 0:
        raise NoInteriorSolution("portfolio FOC has no root in the admissible bracket",
                                 lo, hi, res_lo, res_hi)
    else:
        pi = brentq(res, lo, hi, xtol=1e-15, rtol=8.9e-16)

    delta = prefs.delta
    beta = cs.beta(t, y)
    sigma = cs.sigma(t, y)
    gammas = cs.gamma_atoms(t, y)
    jump_curv = cs.jumps.nu_integral((1.0 + pi * gammas) ** (delta - 2.0) * gammas ** 2) \
        if gammas.size else 0.0
    second = -(1.0 - delta) * (beta ** 2 + sigma ** 2 + jump_curv)
    return PortfolioSolution(
        pi=float(pi),
        residual=res(pi),
        bracket=(lo, hi),
        in_unit_interval=bool(0.0 < pi < 1.0),
        second_derivative=float(second),
    )


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def hamiltonian(
    prefs: Preferences,
    am: ActuarialModel,
    im: InsuranceMarket,
    cs: CoefficientSet,
    fd: FactorDynamics,
    t: float,
    x: float,
    y: float,
    c: float,
    pi: float,
    p,
    adj: AdjointState,
) -> float:
    """Pointwise Hamiltonian: discounted running reward plus adjoint-weighted
    drift, diffusion and jump terms."""
    p = np.asarray(p, dtype=np.float64)
    lam = float(am.lam(t))
    disc = np.exp(-am.cumulative_rho_lambda(t))
    reward = utility(prefs, 1, c)
    if lam != 0.0:
        from .actuarial import legacy as _legacy
        reward += lam * utility(prefs, 2, _legacy(x, p, im, t))
    vals = disc * reward

    mu = cs.mu(t, y)
    vals += (x * (cs.r(t) + pi * mu) - c - p.sum()) * adj.a1
    vals += float(fd.g(y)) * adj.a2
    vals += pi * x * (cs.beta(t, y) * adj.b1 + cs.sigma(t, y) * adj.b2)
    vals += adj.b3
    gammas = cs.gamma_atoms(t, y)
    if gammas.size:
        vals += pi * x * cs.jumps.nu_integral(gammas * adj.d1)
    return float(vals)


def hamiltonian_dpi(
    prefs: Preferences,
    cs: CoefficientSet,
    t: float,
    x: float,
    y: float,
    adj: AdjointState,
) -> float:
    """Partial derivative of the Hamiltonian in the portfolio weight (exact,
    since the weight enters linearly)."""
    gammas = cs.gamma_atoms(t, y)
    jump = cs.jumps.nu_integral(gammas * adj.d1) if gammas.size else 0.0
    return float(x * (cs.mu(t, y) * adj.a1 + cs.beta(t, y) * adj.b1
                      + cs.sigma(t, y) * adj.b2 + jump))


def portfolio_foc_y_residual(
    prefs: Preferences,
    cs: CoefficientSet,
    t: float,
    y: float,
    adj: AdjointState,
    step: float = 1e-5,
) -> float:
    """Factor-derivative of the stationarity bracket with adjoints held fixed.

    Diagnostic only: zero for factor-independent coefficients, generically
    nonzero otherwise (coefficient partials by central differences).
    """
    dy = step * (1.0 + abs(y))

    def d(fn, *args):
        return (fn(t, y + dy, *args) - fn(t, y - dy, *args)) / (2.0 * dy)

    out = d(cs.mu) * adj.a1 + d(cs.beta) * adj.b1 + d(cs.sigma) * adj.b2
    marks = cs.jumps.marks
    if marks.size:
        gamma_y = np.array([d(cs.gamma, z) for z in marks])
        out += cs.jumps.nu_integral(gamma_y * adj.d1)
    return float(out)


# ---------------------------------------------------------------------------
# feedback rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrategyRule:
    """Feedback maps for the portfolio weight, consumption rate and premium
    vector.  ``pi(t, y)`` and ``c(t, x, y)`` broadcast over ndarray states;
    ``p(t, x, y)`` returns shape (M,) + shape(x)."""

    pi: Callable
    c: Callable
    p: Callable
    n_insurers: int


def make_optimal_rule(
    prefs: Preferences,
    am: ActuarialModel,
    im: InsuranceMarket,
    cs: CoefficientSet,
    hgrid,
) -> StrategyRule:
    """Assemble the optimal feedback rule from a solved exponent grid.

    Consumption and premium are proportional to wealth; the proportionality
    factors depend on (t, y) through the interpolated grid.  A zero hazard
    rate sends the premium to its zero limit.
    """
    expo = 1.0 / (prefs.delta - 1.0)

    def pi(t, y):
        return hgrid.interp_pi(t, y)

    def c(t, x, y):
        h = hgrid.interp_h(t, y)
        rate = (np.exp(-h) / prefs.kappa1) ** expo * np.exp(expo * am.cumulative_rho_lambda(t))
        return x * rate

    def p(t, x, y):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros((im.n_insurers,) + x.shape)
        lam = float(am.lam(t))
        if lam == 0.0:
            return out
        n_star = select_insurer(im, t)
        eta = im.eta_values(t)[n_star]
        h = hgrid.interp_h(t, y)
        m = (eta * np.exp(-h) / (prefs.kappa2 * lam)) ** expo \
            * np.exp(expo * am.cumulative_rho_lambda(t))
        out[n_star] = eta * np.maximum(0.0, (m - 1.0)) * x
        return out

    return StrategyRule(pi=pi, c=c, p=p, n_insurers=im.n_insurers)


def shift_pi(rule: StrategyRule, offset: float) -> StrategyRule:
    return StrategyRule(
        pi=lambda t, y: rule.pi(t, y) + offset,
        c=rule.c, p=rule.p, n_insurers=rule.n_insurers,
    )


def scale_consumption(rule: StrategyRule, factor: float) -> StrategyRule:
    return StrategyRule(
        pi=rule.pi,
        c=lambda t, x, y: factor * rule.c(t, x, y),
        p=rule.p, n_insurers=rule.n_insurers,
    )


def premium_off(rule: StrategyRule) -> StrategyRule:
    def p(t, x, y):
        x = np.asarray(x, dtype=np.float64)
        return np.zeros((rule.n_insurers,) + x.shape)

    return StrategyRule(pi=rule.pi, c=rule.c, p=p, n_insurers=rule.n_insurers)
