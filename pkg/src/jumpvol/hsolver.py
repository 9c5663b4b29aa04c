"""Backward semilinear PDE solver for the log marginal-value surface h(t, y).

The candidate marginal value of wealth has the separable form
``x**(delta-1) * exp(-h(t, y))``.  Requiring its compensated drift to match
the costate equation turns h into the solution of a backward PDE in (t, y)
with a source that couples back into h through the consumption and premium
outflow.  The solver follows a fixed-point scheme: freeze the portfolio
weight and the nonlinear source at the current iterate, represent the
linearized equation as a conditional expectation over factor paths, apply it
once (Monte Carlo with antithetic pairs), and damp.

Two source forms are available:

* ``consistent`` (default) -- assembled term by term from the product-rule
  expansion of the candidate costate, so the solved surface makes the
  compensated costate a martingale.  The premium outflow keeps its
  ``max(0, .)`` guard, so regions where insurance is not bought are handled.
* ``printed`` -- the transcribed closed-bracket source built on
  :func:`k_term`, kept selectable for side-by-side comparison runs.  Its
  eta- and exponential-term arrangement differs from the consistent form and
  the discrepancy is meant to be observable in verification output.

Likewise ``phi_mode='drift'`` folds the first-order coupling into the drift
of the simulated factor (which reproduces the PDE), while ``'literal'``
applies it as a pointwise exponential weight on the running source (kept for
comparison; dimensionally a rate, not a discount).

Path noise is frozen per (row, solve): every sweep re-simulates the same
realizations, making the operator deterministic for a given seed.  The fixed
point is therefore reproducible, independent of the damping schedule, and
identical across thread counts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .actuarial import ActuarialModel, InsuranceMarket, select_insurer
from .errors import ConvergenceError, NoInteriorSolution, RejectedInput
from .market import CoefficientSet, FactorDynamics
from .strategy import Preferences, _residual_core

__all__ = ["HSolverConfig", "HGrid", "k_term", "apply_phi", "solve_h_fixed_point"]

# keeps solver noise streams disjoint from the per-path simulation streams
_SOLVER_STREAM_TAG = 0x5048


@dataclass(frozen=True)
class HSolverConfig:
    """Grid, Monte Carlo and mode settings for the fixed-point solve."""

    t_nodes: int = 41
    y_min: float = -2.5
    y_max: float = 4.0
    y_nodes: int = 41
    paths_per_node: int = 400
    substeps: int = 2
    damping: float = 0.7
    tol: float = 1e-4
    max_iters: int = 40
    terminal: str = "ansatz"          # ansatz | integral | exp_integral
    phi_mode: str = "drift"           # drift | literal
    source_form: str = "consistent"   # consistent | printed
    nonlinearity: bool = True
    stderr_target: float = 2e-3
    seed: int = 12345
    threads: int = 1  # reserved cap for future block-parallel sweeps

    def __post_init__(self):
        if self.terminal not in ("ansatz", "integral", "exp_integral"):
            raise RejectedInput(f"unknown terminal mode {self.terminal!r}")
        if self.phi_mode not in ("drift", "literal"):
            raise RejectedInput(f"unknown phi mode {self.phi_mode!r}")
        if self.source_form not in ("consistent", "printed"):
            raise RejectedInput(f"unknown source form {self.source_form!r}")
        if not (0.0 < self.damping <= 1.0):
            raise RejectedInput("damping must lie in (0, 1]")


@dataclass
class HGrid:
    """Tabulated h, its y-derivative, and the coupled portfolio weight."""

    t_nodes: np.ndarray
    y_nodes: np.ndarray
    h: np.ndarray
    h_y: np.ndarray
    pi_star: np.ndarray
    iterations: int = 0
    sup_norm_history: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def _time_weights(self, t: float):
        tn = self.t_nodes
        if tn.size == 1:
            return 0, 0, 0.0
        i = int(np.clip(np.searchsorted(tn, t) - 1, 0, tn.size - 2))
        w = float(np.clip((t - tn[i]) / (tn[i + 1] - tn[i]), 0.0, 1.0))
        return i, i + 1, w

    def _interp(self, grid: np.ndarray, t: float, y):
        i, j, w = self._time_weights(t)
        row = grid[i] * (1.0 - w) + grid[j] * w
        yn = self.y_nodes
        yy = np.asarray(y, dtype=np.float64)
        if yn.size == 1:
            out = np.broadcast_to(row[0], yy.shape).copy()
        else:
            k = np.clip(np.searchsorted(yn, yy) - 1, 0, yn.size - 2)
            wy = np.clip((yy - yn[k]) / (yn[k + 1] - yn[k]), 0.0, 1.0)
            out = row[k] * (1.0 - wy) + row[k + 1] * wy
        return out if np.ndim(y) else float(out)

    def interp_h(self, t: float, y):
        return self._interp(self.h, t, y)

    def interp_h_y(self, t: float, y):
        return self._interp(self.h_y, t, y)

    def interp_pi(self, t: float, y):
        return self._interp(self.pi_star, t, y)

    def with_offset(self, dh: float) -> "HGrid":
        """Copy with h shifted by a constant (slopes and weights unchanged);
        used as a negative control in verification runs."""
        return HGrid(
            t_nodes=self.t_nodes, y_nodes=self.y_nodes,
            h=self.h + dh, h_y=self.h_y.copy(), pi_star=self.pi_star.copy(),
            iterations=self.iterations,
            sup_norm_history=list(self.sup_norm_history),
            diagnostics={**self.diagnostics, "offset": dh},
        )


# ---------------------------------------------------------------------------
# source terms
# ---------------------------------------------------------------------------

def k_term(
    prefs: Preferences,
    am: ActuarialModel,
    im: InsuranceMarket,
    cs: CoefficientSet,
    t: float,
    y: float,
    pi: float,
) -> float:
    """Closed-bracket transcription of the printed source constant:

        -(delta-1) * [ r + mu*pi + delta*eta*
                       + (delta-1)(delta-2)/2 * pi^2 (beta^2+sigma^2)
                       + sum_z w_z ((1+pi g_z)^{delta-1} - 1 - (delta-1) pi g_z) ]

    with the prefactor multiplying the whole bracket, jump integral included.
    """
    delta = prefs.delta
    mu = float(cs.mu(t, y))
    beta = float(cs.beta(t, y))
    sigma = float(cs.sigma(t, y))
    eta = im.eta_values(t)[select_insurer(im, t)]
    gammas = cs.gamma_atoms(t, y)
    for z, g in zip(cs.jumps.marks, gammas):
        if 1.0 + pi * g <= 0.0:
            raise RejectedInput(f"inadmissible weight at atom z={z}")
    quad = 0.5 * (delta - 1.0) * (delta - 2.0) * pi ** 2 * (beta ** 2 + sigma ** 2)
    jump = cs.jumps.nu_integral(
        (1.0 + pi * gammas) ** (delta - 1.0) - 1.0 - (delta - 1.0) * pi * gammas
    ) if gammas.size else 0.0
    r = float(cs.r(t))
    return float(-(delta - 1.0) * (r + mu * pi + delta * eta + quad + jump))


def _row_scalars(am: ActuarialModel, im: InsuranceMarket, cs: CoefficientSet, t: float):
    lam = float(am.lam(t))
    cum = am.cumulative_rho_lambda(t)
    eta = float(im.eta_values(t)[select_insurer(im, t)])
    return lam, cum, eta, float(cs.r(t))


def _source_row(
    prefs: Preferences,
    am: ActuarialModel,
    im: InsuranceMarket,
    cs: CoefficientSet,
    t: float,
    y: np.ndarray,
    h: np.ndarray,
    h_y: np.ndarray,
    pi: np.ndarray,
    cfg: HSolverConfig,
):
    """Source S(t, y) of the linearized backward equation at one time row,
    including the frozen quadratic slope correction, plus the drift
    adjustment row used by the path simulation."""
    delta = prefs.delta
    lam, cum, eta, r = _row_scalars(am, im, cs, t)
    mu = np.asarray(cs.mu(t, y), dtype=np.float64)
    beta = np.asarray(cs.beta(t, y), dtype=np.float64)
    sigma = np.asarray(cs.sigma(t, y), dtype=np.float64)
    gammas = cs.gamma_atoms(t, y)
    weights = cs.jumps.weights

    quad = 0.5 * (delta - 1.0) * (delta - 2.0) * pi ** 2 * (beta ** 2 + sigma ** 2)
    if weights.size:
        factors = 1.0 + pi[None, :] * gammas
        jump = np.einsum(
            "a,a...->...",
            weights,
            factors ** (delta - 1.0) - 1.0 - (delta - 1.0) * pi[None, :] * gammas,
        )
    else:
        jump = np.zeros_like(mu)

    expo = 1.0 / (delta - 1.0)
    if cfg.source_form == "consistent":
        base = -(delta - 1.0) * pi * mu - delta * r - quad - jump
        if cfg.nonlinearity:
            e_t = np.exp(expo * cum)
            growth = np.exp(h / (1.0 - delta))
            c_hat = prefs.kappa1 ** (1.0 / (1.0 - delta)) * growth * e_t
            if lam > 0.0:
                m = (eta / (prefs.kappa2 * lam)) ** expo * growth * e_t
            else:
                m = np.zeros_like(h)
            u = lam * prefs.kappa2 * np.exp(-cum) * np.exp(h) * np.maximum(1.0, m) ** (delta - 1.0)
            outflow = c_hat + eta * np.maximum(0.0, m - 1.0)
            base = base - u - (1.0 - delta) * outflow
        drift_adj = (delta - 1.0) * pi * beta
    else:
        base = -(delta - 1.0) * (r + mu * pi + delta * eta + quad + jump)
        if cfg.nonlinearity:
            bracket = 1.0 + (eta * (eta / (prefs.kappa2 * lam)) ** expo if lam > 0.0 else 0.0)
            base = base + (1.0 - delta) * np.exp(h / (1.0 - delta)) * np.exp(cum) * bracket
        drift_adj = 0.5 * (delta - 1.0) * pi * beta

    source = base - 0.5 * h_y ** 2
    return source, drift_adj


# ---------------------------------------------------------------------------
# grid utilities
# ---------------------------------------------------------------------------

def _central_h_y(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Second-order y-derivative rows (one-sided stencils at the edges)."""
    if y.size == 1:
        return np.zeros_like(h)
    dy = y[1] - y[0]
    out = np.empty_like(h)
    out[:, 1:-1] = (h[:, 2:] - h[:, :-2]) / (2.0 * dy)
    out[:, 0] = (-3.0 * h[:, 0] + 4.0 * h[:, 1] - h[:, 2]) / (2.0 * dy) \
        if y.size > 2 else (h[:, 1] - h[:, 0]) / dy
    out[:, -1] = (3.0 * h[:, -1] - 4.0 * h[:, -2] + h[:, -3]) / (2.0 * dy) \
        if y.size > 2 else (h[:, -1] - h[:, -2]) / dy
    return out


def _solve_pi_row(prefs, cs, t, y, beta_h_y, bracket=(-5.0, 5.0), iters=60):
    """Vectorized bisection of the portfolio FOC across one row of nodes."""
    delta = prefs.delta
    mu = np.asarray(cs.mu(t, y), dtype=np.float64)
    beta = np.asarray(cs.beta(t, y), dtype=np.float64)
    sigma = np.asarray(cs.sigma(t, y), dtype=np.float64)
    vol2 = beta ** 2 + sigma ** 2
    gammas = cs.gamma_atoms(t, y)
    weights = cs.jumps.weights

    lo = np.full(y.shape, bracket[0])
    hi = np.full(y.shape, bracket[1])
    for g in gammas:
        pos = g > 0
        neg = g < 0
        with np.errstate(divide="ignore"):
            lim = -1.0 / np.where(g == 0.0, np.nan, g)
        lo = np.where(pos, np.maximum(lo, lim + 1e-9 * (1.0 + np.abs(lim))), lo)
        hi = np.where(neg, np.minimum(hi, lim - 1e-9 * (1.0 + np.abs(lim))), hi)
    if np.any(lo >= hi):
        raise RejectedInput("empty admissible bracket at some grid node")

    def res(p):
        return _residual_core(delta, mu, vol2, gammas, weights, p, beta_h_y)

    r_lo, r_hi = res(lo), res(hi)
    bad = (r_lo > 0) | (r_hi < 0)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise NoInteriorSolution(
            f"portfolio FOC has no admissible root at grid node y={y[k]:.4g}, t={t:.4g}",
            float(lo[k]), float(hi[k]), float(r_lo[k]), float(r_hi[k]),
        )
    a, b = lo.copy(), hi.copy()
    for _ in range(iters):
        mid = 0.5 * (a + b)
        below = res(mid) < 0.0
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
    return 0.5 * (a + b)


def _terminal_row(prefs: Preferences, am: ActuarialModel, cfg: HSolverConfig, y: np.ndarray):
    total = am.cumulative_rho_lambda(am.horizon)
    if cfg.terminal == "ansatz":
        val = total - np.log(prefs.kappa3)
    elif cfg.terminal == "integral":
        val = total
    else:
        val = np.exp(-total)
    return np.full(y.shape, val)


def _lerp_row(row: np.ndarray, y0: float, inv_dy: float, pts: np.ndarray) -> np.ndarray:
    """Linear interpolation of one uniformly-gridded row, clamped at the edges."""
    u = (pts - y0) * inv_dy
    np.clip(u, 0.0, row.size - 1, out=u)
    i = u.astype(np.int64)
    np.minimum(i, row.size - 2, out=i)
    u -= i  # u now holds the segment weight in [0, 1]
    lo = row[i]
    hi = row[i + 1]
    hi -= lo
    hi *= u
    hi += lo
    return hi


# ---------------------------------------------------------------------------
# the fixed-point operator
# ---------------------------------------------------------------------------

def apply_phi(
    state: HGrid,
    prefs: Preferences,
    am: ActuarialModel,
    im: InsuranceMarket,
    cs: CoefficientSet,
    fd: FactorDynamics,
    cfg: HSolverConfig,
    seed: int | None = None,
):
    """One sweep of the conditional-expectation operator.

    For every node (t_i, y_j) with t_i < T, simulates antithetic factor paths
    to the horizon, accumulates the frozen source by the trapezoid rule on
    the time grid, and adds the interpolated terminal row.  Returns
    ``(values, stderr)`` arrays over the full grid; the terminal row is
    reproduced exactly with zero error.
    """
    t = state.t_nodes
    y = state.y_nodes
    nt, ny = t.size, y.size
    seed = cfg.seed if seed is None else seed
    n_pairs = max(cfg.paths_per_node // 2, 1)
    y0, inv_dy = (float(y[0]), 1.0 / (y[1] - y[0])) if ny > 1 else (float(y[0]), 0.0)

    rows = [
        _source_row(prefs, am, im, cs, float(t[i]), y, state.h[i], state.h_y[i],
                    state.pi_star[i], cfg)
        for i in range(nt)
    ]
    source = np.stack([r[0] for r in rows])
    drift_adj = np.stack([r[1] for r in rows])
    literal = cfg.phi_mode == "literal"
    if literal:
        # Pointwise exponential weight exp(g(y) + adj) on the running source.
        g_row = np.array([float(fd.g(v)) for v in y])
        log_weight = g_row[None, :] + drift_adj

    values = np.empty((nt, ny))
    stderr = np.zeros((nt, ny))
    values[nt - 1] = state.h[nt - 1]
    if nt == 1:
        return values, stderr

    # All start rows march in one ensemble: the block for row i joins at
    # t_i and is stepped jointly with the earlier blocks.  The draw order
    # depends only on the grid shape, so every sweep of the solve resamples
    # identical noise and the operator is deterministic for a given seed.
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SOLVER_STREAM_TAG)))
    yp = np.empty((nt - 1, ny, n_pairs))
    ym = np.empty((nt - 1, ny, n_pairs))
    acc_p = np.zeros((nt - 1, ny, n_pairs))
    acc_m = np.zeros((nt - 1, ny, n_pairs))
    start_col = y[:, None]

    def src(j, pts):
        vals = _lerp_row(source[j], y0, inv_dy, pts)
        if literal:
            vals = vals * np.exp(_lerp_row(log_weight[j], y0, inv_dy, pts))
        return vals

    for j in range(nt - 1):
        yp[j] = start_col
        ym[j] = start_col
        active_p = yp[: j + 1]
        active_m = ym[: j + 1]
        dt = float(t[j + 1] - t[j])
        half = 0.5 * dt
        acc_p[: j + 1] += half * src(j, active_p)
        acc_m[: j + 1] += half * src(j, active_m)
        dts = dt / cfg.substeps
        sq = np.sqrt(dts)
        adjust = not literal and bool(np.any(drift_adj[j]))
        for _ in range(cfg.substeps):
            z = rng.standard_normal(active_p.shape)
            if adjust:
                active_p += (np.asarray(fd.g(active_p))
                             + _lerp_row(drift_adj[j], y0, inv_dy, active_p)) * dts + sq * z
                active_m += (np.asarray(fd.g(active_m))
                             + _lerp_row(drift_adj[j], y0, inv_dy, active_m)) * dts - sq * z
            else:
                active_p += np.asarray(fd.g(active_p)) * dts + sq * z
                active_m += np.asarray(fd.g(active_m)) * dts - sq * z
        acc_p[: j + 1] += half * src(j + 1, active_p)
        acc_m[: j + 1] += half * src(j + 1, active_m)

    acc_p += _lerp_row(state.h[nt - 1], y0, inv_dy, yp)
    acc_m += _lerp_row(state.h[nt - 1], y0, inv_dy, ym)
    pair_vals = 0.5 * (acc_p + acc_m)
    values[: nt - 1] = pair_vals.mean(axis=2)
    if n_pairs > 1:
        stderr[: nt - 1] = pair_vals.std(axis=2, ddof=1) / np.sqrt(n_pairs)

    worst = float(stderr.max())
    if worst > cfg.stderr_target:
        warnings.warn(
            f"operator sweep standard error {worst:.2e} exceeds target "
            f"{cfg.stderr_target:.2e}; increase paths_per_node",
            stacklevel=2,
        )
    return values, stderr


def solve_h_fixed_point(
    prefs: Preferences,
    am: ActuarialModel,
    im: InsuranceMarket,
    cs: CoefficientSet,
    fd: FactorDynamics,
    cfg: HSolverConfig,
) -> HGrid:
    """Damped fixed-point iteration coupling the surface and the weight grid.

    Alternates (a) a vectorized root-solve of the portfolio condition at every
    node given the current slope rows, (b) one operator sweep, and (c) a
    damped update with central-difference slope recomputation, until the
    sup-norm change drops below tolerance.
    """
    T = am.horizon
    t = np.linspace(0.0, T, cfg.t_nodes) if cfg.t_nodes > 1 else np.array([T])
    y = np.linspace(cfg.y_min, cfg.y_max, cfg.y_nodes)
    terminal = _terminal_row(prefs, am, cfg, y)

    h = np.tile(terminal, (t.size, 1))
    h_y = _central_h_y(h, y)
    pi = np.stack([
        _solve_pi_row(prefs, cs, float(t[i]), y,
                      np.asarray(cs.beta(float(t[i]), y)) * h_y[i])
        for i in range(t.size)
    ])
    state = HGrid(t_nodes=t, y_nodes=y, h=h, h_y=h_y, pi_star=pi)
    if t.size == 1:
        state.iterations = 1
        state.sup_norm_history = [0.0]
        state.diagnostics = {"stderr_max": 0.0, "terminal": cfg.terminal,
                             "source_form": cfg.source_form, "phi_mode": cfg.phi_mode}
        return state

    history = []
    stderr_max = 0.0
    for it in range(1, cfg.max_iters + 1):
        phi_vals, stderr = apply_phi(state, prefs, am, im, cs, fd, cfg)
        stderr_max = max(stderr_max, float(stderr.max()))
        h_new = (1.0 - cfg.damping) * state.h + cfg.damping * phi_vals
        h_new[-1] = terminal
        change = float(np.max(np.abs(h_new - state.h)))
        history.append(change)
        state.h = h_new
        state.h_y = _central_h_y(state.h, y)
        state.pi_star = np.stack([
            _solve_pi_row(prefs, cs, float(t[i]), y,
                          np.asarray(cs.beta(float(t[i]), y)) * state.h_y[i])
            for i in range(t.size)
        ])
        if change < cfg.tol:
            state.iterations = it
            state.sup_norm_history = history
            state.diagnostics = {
                "stderr_max": stderr_max,
                "terminal": cfg.terminal,
                "source_form": cfg.source_form,
                "phi_mode": cfg.phi_mode,
            }
            return state

    raise ConvergenceError(
        f"fixed point did not converge below {cfg.tol} in {cfg.max_iters} sweeps",
        history,
    )
