"""Financial-market primitives: bond rate, jump-diffusion asset coefficients,
external factor dynamics, and sampled validation of the standing assumptions.

Coefficient maps are plain callables built by the named constructors below so
that scenarios stay config-drivable.  Every map accepts scalar or ndarray
``y`` and broadcasts; time enters as a scalar.  Jump marks live on a finite
atom set, which turns every integral against the jump intensity measure into
an exact weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ModelError, RejectedInput

__all__ = [
    "JumpSpec",
    "CoefficientSet",
    "FactorDynamics",
    "AssumptionCheck",
    "AssumptionReport",
    "constant_map",
    "affine_y_map",
    "table_map",
    "constant_rate",
    "table_rate",
    "gamma_scaled_mark",
    "gamma_mark_times_factor",
    "gamma_constant",
    "eval_coefficients",
    "check_assumptions",
    "sample_jump_marks",
]


# ---------------------------------------------------------------------------
# coefficient map constructors
# ---------------------------------------------------------------------------

def constant_map(value: float) -> Callable:
    """Map (t, y) -> value, broadcast over y."""
    v = float(value)

    def f(t, y):
        return np.broadcast_to(np.float64(v), np.shape(y)).copy() if np.ndim(y) else v

    f.form = ("constant", v)
    return f


def affine_y_map(intercept: float, slope: float) -> Callable:
    """Map (t, y) -> intercept + slope * y."""
    a, b = float(intercept), float(slope)

    def f(t, y):
        return a + b * np.asarray(y, dtype=np.float64) if np.ndim(y) else a + b * y

    f.form = ("affine_y", a, b)
    return f


def table_map(t_nodes: Sequence[float], y_nodes: Sequence[float], values) -> Callable:
    """Bilinear interpolation on a rectangular (t, y) grid, clamped at edges."""
    tn = np.asarray(t_nodes, dtype=np.float64)
    yn = np.asarray(y_nodes, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape != (tn.size, yn.size):
        raise RejectedInput(
            f"table shape {vals.shape} does not match grid ({tn.size}, {yn.size})"
        )

    def f(t, y):
        ti = np.clip(np.searchsorted(tn, t) - 1, 0, max(tn.size - 2, 0))
        if tn.size == 1:
            row_lo = row_hi = vals[0]
            wt = 0.0
        else:
            row_lo, row_hi = vals[ti], vals[ti + 1]
            wt = (t - tn[ti]) / (tn[ti + 1] - tn[ti])
            wt = min(max(wt, 0.0), 1.0)
        row = row_lo + wt * (row_hi - row_lo)
        yy = np.asarray(y, dtype=np.float64)
        yi = np.clip(np.searchsorted(yn, yy) - 1, 0, max(yn.size - 2, 0))
        if yn.size == 1:
            out = np.broadcast_to(row[0], yy.shape).copy()
        else:
            wy = np.clip((yy - yn[yi]) / (yn[yi + 1] - yn[yi]), 0.0, 1.0)
            out = row[yi] + wy * (row[yi + 1] - row[yi])
        return out if np.ndim(y) else float(out)

    f.form = ("table", tn, yn, vals)
    return f


def constant_rate(value: float) -> Callable:
    """Rate map t -> value."""
    v = float(value)

    def f(t):
        return v

    f.form = ("constant", v)
    return f


def table_rate(t_nodes: Sequence[float], values: Sequence[float]) -> Callable:
    """Piecewise-linear rate map t -> interp(t), clamped outside the nodes."""
    tn = np.asarray(t_nodes, dtype=np.float64)
    vn = np.asarray(values, dtype=np.float64)

    def f(t):
        return float(np.interp(t, tn, vn))

    f.form = ("table", tn, vn)
    return f


def gamma_scaled_mark(scale: float = 1.0) -> Callable:
    """Jump dispersion (t, y, z) -> scale * z."""
    s = float(scale)

    def f(t, y, z):
        return s * np.asarray(z, dtype=np.float64) if np.ndim(z) or np.ndim(y) else s * z

    f.form = ("scaled_mark", s)
    return f


def gamma_mark_times_factor(scale: float = 1.0) -> Callable:
    """Jump dispersion (t, y, z) -> scale * z * y (factor-proportional jumps)."""
    s = float(scale)

    def f(t, y, z):
        out = s * np.asarray(z, dtype=np.float64) * np.asarray(y, dtype=np.float64)
        return out if (np.ndim(z) or np.ndim(y)) else float(out)

    f.form = ("mark_times_factor", s)
    return f


def gamma_constant(value: float) -> Callable:
    """Jump dispersion identically equal to ``value`` (test helper)."""
    v = float(value)

    def f(t, y, z):
        shape = np.broadcast_shapes(np.shape(y), np.shape(z))
        return np.full(shape, v) if shape else v

    f.form = ("constant", v)
    return f


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JumpSpec:
    """Compound-Poisson jump specification with finitely many mark atoms.

    The induced intensity measure puts weight ``rate * prob`` on each mark,
    so integrals against it are exact finite sums (see :meth:`nu_integral`).
    """

    rate: float
    atoms: tuple = ()  # tuple of (mark, probability)

    def __post_init__(self):
        if self.rate < 0:
            raise RejectedInput("jump rate must be nonnegative")
        atoms = tuple((float(z), float(p)) for z, p in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if self.rate > 0:
            if not atoms:
                raise RejectedInput("positive jump rate requires a nonempty atom list")
            total = sum(p for _, p in atoms)
            if abs(total - 1.0) > 1e-12:
                raise RejectedInput(f"atom probabilities sum to {total!r}, not 1")
            if any(p < 0 or p > 1 for _, p in atoms):
                raise RejectedInput("atom probabilities must lie in [0, 1]")
        elif atoms:
            raise RejectedInput("zero jump rate requires an empty atom list")

    @property
    def marks(self) -> np.ndarray:
        return np.array([z for z, _ in self.atoms], dtype=np.float64)

    @property
    def probs(self) -> np.ndarray:
        return np.array([p for _, p in self.atoms], dtype=np.float64)

    @property
    def weights(self) -> np.ndarray:
        """Intensity-measure weight of each atom (rate * probability)."""
        return self.rate * self.probs

    def nu_integral(self, values) -> float:
        """Exact integral of per-atom values against the intensity measure."""
        if not self.atoms:
            return 0.0
        return float(np.dot(self.weights, np.asarray(values, dtype=np.float64)))


@dataclass(frozen=True)
class CoefficientSet:
    """Bond rate r(t), asset coefficients alpha/beta/sigma (t, y), jump
    dispersion gamma(t, y, z), and the jump specification."""

    r: Callable
    alpha: Callable
    beta: Callable
    sigma: Callable
    gamma: Callable
    jumps: JumpSpec = field(default_factory=lambda: JumpSpec(0.0))

    def mu(self, t: float, y):
        """Excess return alpha(t, y) - r(t)."""
        return self.alpha(t, y) - self.r(t)

    def gamma_atoms(self, t: float, y) -> np.ndarray:
        """gamma evaluated at every jump atom; shape (n_atoms,) + shape(y)."""
        marks = self.jumps.marks
        if marks.size == 0:
            return np.empty((0,) + np.shape(y)) if np.ndim(y) else np.empty(0)
        rows = [np.asarray(self.gamma(t, y, z), dtype=np.float64) for z in marks]
        return np.stack([np.broadcast_to(rw, np.shape(y)) for rw in rows]) if np.ndim(y) else np.array(rows)


@dataclass(frozen=True)
class FactorDynamics:
    """Drift g of the external factor dY = g(Y) dt + dW1, with its declared
    Lipschitz constant, derivative bound and working domain."""

    g: Callable
    g_lipschitz_bound: float
    g_derivative_bound: float
    domain: tuple  # (lo, hi), closed interval used for grid work

    def __post_init__(self):
        if self.g_lipschitz_bound <= 0:
            raise RejectedInput("Lipschitz bound must be positive")
        lo, hi = self.domain
        if not lo < hi:
            raise RejectedInput("factor domain must be a nondegenerate interval")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientValues:
    r: float
    alpha: float
    mu: float
    beta: float
    sigma: float


def eval_coefficients(
    cs: CoefficientSet,
    t: float,
    y: float,
    *,
    horizon: float | None = None,
    domain: tuple | None = None,
) -> CoefficientValues:
    """Evaluate (r, alpha, mu, beta, sigma) at one point, with admissibility checks.

    Raises :class:`RejectedInput` if (t, y) leaves the declared domain and
    :class:`ModelError` if any map returns a non-finite value or the excess
    return is not strictly positive.
    """
    if horizon is not None and not (0.0 <= t <= horizon):
        raise RejectedInput(f"t={t} outside [0, {horizon}]")
    if domain is not None and not (domain[0] <= y <= domain[1]):
        raise RejectedInput(f"y={y} outside factor domain {domain}")

    values = {
        "r": float(cs.r(t)),
        "alpha": float(cs.alpha(t, y)),
        "beta": float(cs.beta(t, y)),
        "sigma": float(cs.sigma(t, y)),
    }
    for name, v in values.items():
        if not np.isfinite(v):
            raise ModelError(f"coefficient map '{name}' returned non-finite value {v}")
    mu = values["alpha"] - values["r"]
    if mu <= 0.0:
        raise ModelError(f"mu must be positive (got {mu} at t={t}, y={y})")
    return CoefficientValues(values["r"], values["alpha"], mu, values["beta"], values["sigma"])


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    worst_location: tuple
    worst_value: float
    detail: str = ""


@dataclass
class AssumptionReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self):
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            out.append(
                f"[{status}] {c.name}: worst={c.worst_value:.6g} at {c.worst_location}"
                + (f" ({c.detail})" if c.detail else "")
            )
        return out

    def __str__(self):
        return "\n".join(self.lines())


def _extreme(values: np.ndarray, t_grid, y_grid, take_min: bool):
    """Worst value and its grid location for a (nt, ny) sample array."""
    idx = np.unravel_index(np.argmin(values) if take_min else np.argmax(values), values.shape)
    return float(values[idx]), (float(t_grid[idx[0]]), float(y_grid[idx[1]]))


def check_assumptions(
    cs: CoefficientSet,
    fd: FactorDynamics,
    t_grid: Sequence[float],
    y_grid: Sequence[float] | None = None,
) -> AssumptionReport:
    """Sampled validation of the market assumptions.

    Always returns a report; failed assumptions become failed entries rather
    than exceptions.  ``y_grid`` defaults to 101 points across the declared
    factor domain.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.size == 0:
        raise RejectedInput("sample grid must be nonempty")
    if y_grid is None:
        y_grid = np.linspace(fd.domain[0], fd.domain[1], 101)
    y_grid = np.asarray(y_grid, dtype=np.float64)

    checks = []

    r_vals = np.array([cs.r(t) for t in t_grid])
    worst_r = float(r_vals.min())
    checks.append(AssumptionCheck(
        "r positive", bool(worst_r > 0) and bool(np.isfinite(r_vals).all()),
        (float(t_grid[int(np.argmin(r_vals))]),), worst_r,
    ))

    def sample(fn):
        return np.stack([np.asarray(fn(t, y_grid), dtype=np.float64) for t in t_grid])

    alpha = sample(cs.alpha)
    beta = sample(cs.beta)
    sigma = sample(cs.sigma)

    for name, arr in (("alpha", alpha), ("beta", beta), ("sigma", sigma)):
        finite = bool(np.isfinite(arr).all())
        worst, loc = _extreme(np.abs(arr), t_grid, y_grid, take_min=False)
        checks.append(AssumptionCheck(f"{name} bounded", finite, loc, worst))

    marks = cs.jumps.marks
    if marks.size:
        gam = np.stack([
            np.stack([np.broadcast_to(cs.gamma(t, y_grid, z), y_grid.shape) for z in marks])
            for t in t_grid
        ])  # (nt, natoms, ny)
        finite = bool(np.isfinite(gam).all())
        gmax = np.abs(gam).max(axis=1)
        worst, loc = _extreme(gmax, t_grid, y_grid, take_min=False)
        checks.append(AssumptionCheck("gamma bounded", finite, loc, worst))
        gmin = gam.min(axis=1)
        worst, loc = _extreme(gmin, t_grid, y_grid, take_min=True)
        checks.append(AssumptionCheck(
            "gamma > -1", bool(worst > -1.0), loc, worst,
            detail="" if worst > -1.0 else "gamma > -1 violated",
        ))
        gamma_sq = (gam ** 2 * cs.jumps.weights[None, :, None]).sum(axis=1)
    else:
        gamma_sq = np.zeros((t_grid.size, y_grid.size))

    mu = alpha - r_vals[:, None]
    worst, loc = _extreme(mu, t_grid, y_grid, take_min=True)
    checks.append(AssumptionCheck("mu positive", bool(worst > 0), loc, worst))

    # Integrated (beta^2 + sigma^2 + int gamma^2 nu(dz)) dt, worst case over y.
    integrand = (beta ** 2 + sigma ** 2 + gamma_sq).max(axis=1)
    total = float(np.trapezoid(integrand, t_grid)) if t_grid.size > 1 else float(integrand[0])
    checks.append(AssumptionCheck(
        "integrability", bool(np.isfinite(total)), (float(t_grid[0]),), total,
        detail="time integral of worst-case squared volatilities",
    ))

    g_vals = np.array([float(fd.g(y)) for y in y_grid])
    if y_grid.size > 1:
        slopes = np.abs(np.diff(g_vals) / np.diff(y_grid))
        ratio = float(slopes.max())
        loc_idx = int(np.argmax(slopes))
        loc = (float(y_grid[loc_idx]),)
    else:
        ratio, loc = 0.0, (float(y_grid[0]),)
    checks.append(AssumptionCheck(
        "g lipschitz", bool(ratio <= fd.g_lipschitz_bound * (1.0 + 1e-6)), loc, ratio,
        detail=f"declared bound {fd.g_lipschitz_bound}",
    ))
    checks.append(AssumptionCheck(
        "g derivative bound", bool(ratio <= fd.g_derivative_bound * (1.0 + 1e-6)), loc, ratio,
        detail=f"declared bound {fd.g_derivative_bound}",
    ))

    return AssumptionReport(checks)


def sample_jump_marks(js: JumpSpec, dt: float, rng: np.random.Generator):
    """Draw the jump marks falling in an interval of length ``dt``.

    Returns ``(marks, compensator)`` where ``compensator`` is the mean of the
    raw jump sum over the interval, i.e. ``rate * dt * sum(p_i * z_i)``; the
    compensated increment is ``marks.sum() - compensator``.
    """
    if dt <= 0:
        raise RejectedInput("dt must be positive")
    if js.rate == 0.0 or not js.atoms:
        return np.empty(0), 0.0
    n = int(rng.poisson(js.rate * dt))
    marks = rng.choice(js.marks, size=n, p=js.probs) if n else np.empty(0)
    compensator = js.rate * dt * float(np.dot(js.probs, js.marks))
    return marks, compensator
