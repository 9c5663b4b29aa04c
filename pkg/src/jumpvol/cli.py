"""Scenario-driven command-line front end.

Scenarios live in INI-style key=value files with one section per model
block (see ``scripts/scenarios/`` for annotated examples and the README for
the full schema).  Outputs are RFC-4180 CSV files plus a plain-text
verification report; every file starts with a comment line recording the
config hash and the seed, and identical (config, seed) pairs reproduce
byte-identical bytes.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import actuarial, market, mc, oracle_ou, strategy
from .errors import ConfigError
from .hsolver import HGrid, HSolverConfig, solve_h_fixed_point
from .market import CoefficientSet, FactorDynamics, JumpSpec
from .mc import NoiseBank, SimConfig, TestReport

MODES = ("solve-h", "simulate", "verify", "example", "all")
DEFAULT_CHECKS = (
    "assumptions", "adjoint", "adjoint_negative_control", "necessary",
    "suboptimality", "sufficient_x", "integrability",
)
OPTIONAL_CHECKS = ("sufficient_y", "sufficient_diag", "a2")


@dataclass
class ScenarioConfig:
    mode: str
    seed: int
    out_dir: Path
    allow_assumption_failures: bool
    config_hash: str
    parser: configparser.ConfigParser

    def section(self, name: str) -> configparser.SectionProxy:
        if name not in self.parser:
            raise ConfigError(f"missing config section [{name}] required by mode {self.mode!r}")
        return self.parser[name]


def _get(section, key, cast, default=None):
    if key not in section:
        if default is not None:
            return default
        raise ConfigError(f"missing key {key!r} in section [{section.name}]")
    raw = section[key]
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section.name}] {key} = {raw!r}: {exc}") from exc


def _float_list(raw: str):
    return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]


def _rate_map(section, prefix: str):
    form = _get(section, f"{prefix}_form", str, "constant")
    if form == "constant":
        return market.constant_rate(_get(section, f"{prefix}_value", float))
    if form == "table":
        times = _float_list(_get(section, f"{prefix}_times", str))
        values = _float_list(_get(section, f"{prefix}_values", str))
        if len(times) != len(values):
            raise ConfigError(f"[{section.name}] {prefix} table lengths differ")
        return market.table_rate(times, values)
    raise ConfigError(f"unknown {prefix}_form {form!r} (constant | table)")


def _surface_map(section, prefix: str):
    form = _get(section, f"{prefix}_form", str, "constant")
    if form == "constant":
        return market.constant_map(_get(section, f"{prefix}_value", float))
    if form == "affine_y":
        return market.affine_y_map(
            _get(section, f"{prefix}_intercept", float),
            _get(section, f"{prefix}_slope", float),
        )
    if form == "table":
        t_nodes = _float_list(_get(section, f"{prefix}_t_nodes", str))
        y_nodes = _float_list(_get(section, f"{prefix}_y_nodes", str))
        rows = [_float_list(row) for row in
                _get(section, f"{prefix}_values", str).split("|")]
        return market.table_map(t_nodes, y_nodes, rows)
    raise ConfigError(f"unknown {prefix}_form {form!r} (constant | affine_y | table)")


def _gamma_map(section):
    form = _get(section, "gamma_form", str, "scaled_mark")
    if form == "scaled_mark":
        return market.gamma_scaled_mark(_get(section, "gamma_scale", float, 1.0))
    if form == "mark_times_factor":
        return market.gamma_mark_times_factor(_get(section, "gamma_scale", float, 1.0))
    if form == "constant":
        return market.gamma_constant(_get(section, "gamma_value", float))
    raise ConfigError(f"unknown gamma_form {form!r}")


def _jump_spec(section) -> JumpSpec:
    rate = _get(section, "jump_rate", float, 0.0)
    atoms = []
    raw = section.get("jump_atoms", "").strip()
    if raw:
        for piece in raw.split(","):
            z, _, p = piece.partition(":")
            atoms.append((float(z), float(p)))
    return JumpSpec(rate=rate, atoms=tuple(atoms))


def build_market(cfg: ScenarioConfig):
    sec = cfg.section("market")
    cs = CoefficientSet(
        r=_rate_map(sec, "r"),
        alpha=_surface_map(sec, "alpha"),
        beta=_surface_map(sec, "beta"),
        sigma=_surface_map(sec, "sigma"),
        gamma=_gamma_map(sec),
        jumps=_jump_spec(sec),
    )
    fsec = cfg.section("factor")
    form = _get(fsec, "g_form", str, "linear")
    if form == "linear":
        a = _get(fsec, "g_intercept", float, 0.0)
        b = _get(fsec, "g_slope", float)

        def g(y):
            return a + b * np.asarray(y, dtype=np.float64) if np.ndim(y) else a + b * y
    elif form == "zero":
        def g(y):
            return np.zeros(np.shape(y)) if np.ndim(y) else 0.0
    else:
        raise ConfigError(f"unknown g_form {form!r} (linear | zero)")
    fd = FactorDynamics(
        g=g,
        g_lipschitz_bound=_get(fsec, "lipschitz_bound", float),
        g_derivative_bound=_get(fsec, "derivative_bound", float),
        domain=(_get(fsec, "domain_low", float), _get(fsec, "domain_high", float)),
    )
    y0 = _get(fsec, "y0", float)
    return cs, fd, y0


def build_actuarial(cfg: ScenarioConfig):
    sec = cfg.section("actuarial")
    am = actuarial.ActuarialModel(
        lam=_rate_map(sec, "lambda"),
        rho=_rate_map(sec, "rho"),
        horizon=_get(sec, "horizon", float),
    )
    etas = [market.constant_rate(v) for v in _float_list(_get(sec, "etas", str))]
    im = actuarial.InsuranceMarket(etas=etas)
    return am, im


def build_preferences(cfg: ScenarioConfig) -> strategy.Preferences:
    sec = cfg.section("preferences")
    return strategy.Preferences(
        delta=_get(sec, "delta", float),
        kappa1=_get(sec, "kappa1", float, 1.0),
        kappa2=_get(sec, "kappa2", float, 1.0),
        kappa3=_get(sec, "kappa3", float, 1.0),
    )


def build_solver_config(cfg: ScenarioConfig, threads: int) -> HSolverConfig:
    sec = cfg.section("grid")
    return HSolverConfig(
        t_nodes=_get(sec, "t_nodes", int, 41),
        y_min=_get(sec, "y_low", float),
        y_max=_get(sec, "y_high", float),
        y_nodes=_get(sec, "y_nodes", int, 41),
        paths_per_node=_get(sec, "paths_per_node", int, 1500),
        substeps=_get(sec, "substeps", int, 2),
        damping=_get(sec, "damping", float, 0.7),
        tol=_get(sec, "tol", float, 1e-4),
        max_iters=_get(sec, "max_iters", int, 40),
        terminal=_get(sec, "terminal", str, "ansatz"),
        phi_mode=_get(sec, "phi_mode", str, "drift"),
        source_form=_get(sec, "source_form", str, "consistent"),
        nonlinearity=_get(sec, "nonlinearity", lambda v: v.lower() != "false", True),
        stderr_target=_get(sec, "stderr_target", float, 2e-3),
        seed=cfg.seed,
        threads=threads,
    )


def build_sim_config(cfg: ScenarioConfig, y0: float) -> SimConfig:
    sec = cfg.section("simulation")
    return SimConfig(
        steps=_get(sec, "steps", int, 2000),
        paths=_get(sec, "paths", int, 10_000),
        x0=_get(sec, "x0", float, 1.0),
        y0=y0,
        seed=cfg.seed,
        fd_epsilon=_get(sec, "fd_epsilon", float, 0.05),
        chunk=_get(sec, "chunk", int, 1000),
    )


def _time_pairs(cfg: ScenarioConfig, horizon: float):
    sec = cfg.section("simulation")
    raw = sec.get("time_pairs", "").strip()
    if not raw:
        qs = np.linspace(0.0, horizon, 5)
        return list(zip(qs[:-1], qs[1:]))
    pairs = []
    for piece in raw.split(","):
        s, _, t = piece.partition(":")
        pairs.append((float(s), float(t)))
    return pairs


# ---------------------------------------------------------------------------
# output writers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(path: Path, header_comment: str, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(header_comment + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_h_grid(path: Path, comment: str, hgrid: HGrid):
    rows = []
    for i, t in enumerate(hgrid.t_nodes):
        for j, y in enumerate(hgrid.y_nodes):
            rows.append((t, y, hgrid.h[i, j], hgrid.h_y[i, j], hgrid.pi_star[i, j]))
    _write_csv(path, comment, ("t", "y", "h", "h_y", "pi_star"), rows)


def write_performance(path: Path, comment: str, est: mc.PerformanceEstimate):
    row = est.row()
    _write_csv(path, comment, tuple(row.keys()), [tuple(row.values())])


def write_report(path: Path, comment: str, reports):
    lines = [comment]
    for rep in reports:
        lines.append("")
        lines.append(rep.text())
    n_fail = sum(1 for rep in reports for ln in rep.lines if not ln.passed)
    n_total = sum(len(rep.lines) for rep in reports)
    lines.append("")
    lines.append(f"SUMMARY: {'PASS' if n_fail == 0 else 'FAIL'} "
                 f"({n_total} checks, {n_fail} failures)")
    path.write_text("\n".join(lines) + "\n")
    return n_fail


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def _assumption_report_lines(report) -> TestReport:
    out = TestReport(title="assumptions")
    for c in report.checks:
        out.lines.append(mc.CheckLine(
            name=f"assumption: {c.name}", passed=c.passed, value=c.worst_value,
            detail=c.detail,
        ))
    return out


def run(cfg: ScenarioConfig) -> int:
    """Execute the configured pipeline; returns the process exit status."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    comment = f"# config_hash={cfg.config_hash} seed={cfg.seed}"
    threads = max(int(os.environ.get("JUMPVOL_THREADS", "1")), 1)
    reports = []
    exit_code = 0

    if cfg.mode in ("example", "all"):
        exit_code |= run_example(cfg, comment)

    if cfg.mode == "example":
        return exit_code

    prefs = build_preferences(cfg)
    am, im = build_actuarial(cfg)
    cs, fd, y0 = build_market(cfg)
    sim = build_sim_config(cfg, y0)

    t_samples = np.linspace(0.0, am.horizon, 101)
    assumptions = market.check_assumptions(cs, fd, t_samples)
    if not assumptions.passed and not cfg.allow_assumption_failures:
        sys.stderr.write("assumption checks failed:\n" + str(assumptions) + "\n")
        sys.stderr.write("rerun with --allow-assumption-failures to proceed\n")
        return 2

    solver_cfg = build_solver_config(cfg, threads)
    hgrid = solve_h_fixed_point(prefs, am, im, cs, fd, solver_cfg)
    write_h_grid(cfg.out_dir / "h_grid.csv", comment, hgrid)
    if cfg.mode == "solve-h":
        return exit_code

    rule = strategy.make_optimal_rule(prefs, am, im, cs, hgrid)
    bank = NoiseBank(np.linspace(0.0, am.horizon, sim.steps + 1), cs.jumps,
                     sim.paths, sim.seed)

    # per-path summaries and the performance estimate
    comps, flagged, snaps, extremes = mc._performance_paths(
        prefs, am, im, cs, fd, rule, bank, sim.x0, sim.y0, sim.chunk,
        snapshot_indices=(sim.steps,), want_extremes=True,
    )
    x_T, y_T = snaps[sim.steps]
    rows = [
        (i, x_T[i], y_T[i], extremes["min_x"][i], extremes["n_jumps"][i],
         int(flagged[i]), comps[0, i], comps[1, i], comps[2, i])
        for i in range(bank.n_paths)
    ]
    _write_csv(cfg.out_dir / "paths_summary.csv", comment,
               ("path", "x_terminal", "y_terminal", "min_wealth", "n_jumps",
                "flagged", "consumption_utility", "legacy_utility", "terminal_utility"),
               rows)
    est = mc.estimate_performance(prefs, am, im, cs, fd, rule, sim.x0, sim.y0, sim, bank=bank)
    write_performance(cfg.out_dir / "performance.csv", comment, est)
    if cfg.mode == "simulate":
        return exit_code

    # verification suites
    checks = [c.strip() for c in
              cfg.parser.get("verify", "checks", fallback=", ".join(DEFAULT_CHECKS)).split(",")
              if c.strip()]
    unknown = set(checks) - set(DEFAULT_CHECKS) - set(OPTIONAL_CHECKS)
    if unknown:
        raise ConfigError(f"unknown verify checks: {sorted(unknown)}")
    pairs = _time_pairs(cfg, am.horizon)
    discount = cfg.parser.get("simulation", "adjoint_discount", fallback="eta")

    if "assumptions" in checks:
        reports.append(_assumption_report_lines(assumptions))
    if "adjoint" in checks:
        reports.append(mc.adjoint_residual_test(
            prefs, am, im, cs, fd, hgrid, sim.x0, sim.y0, sim,
            time_pairs=pairs, discount=discount, bank=bank))
    if "adjoint_negative_control" in checks:
        perturbed = mc.adjoint_residual_test(
            prefs, am, im, cs, fd, hgrid.with_offset(0.1), sim.x0, sim.y0, sim,
            time_pairs=pairs, discount=discount, bank=bank)
        detected = not perturbed.passed
        neg = TestReport(title="adjoint negative control (surface shifted +0.1)")
        neg.lines.append(mc.CheckLine(
            name="drift detected under perturbed surface", passed=detected,
            value=float(sum(abs(l.value) for l in perturbed.lines)),
            detail="martingale test must fail on the shifted surface",
        ))
        reports.append(neg)
    if "necessary" in checks:
        reports.append(mc.necessary_condition_test(
            prefs, am, im, cs, fd, rule, sim.x0, sim.y0, sim, hgrid=hgrid, bank=bank))
    if "suboptimality" in checks:
        reports.append(mc.perturbation_suboptimality_test(
            prefs, am, im, cs, fd, rule, sim.x0, sim.y0, sim, bank=bank))
    wanted_dirs = [d for d, key in (("x", "sufficient_x"), ("y", "sufficient_y"),
                                    ("diag", "sufficient_diag")) if key in checks]
    if wanted_dirs or "integrability" in checks:
        suff = mc.sufficient_condition_report(
            prefs, am, im, cs, fd, hgrid, sim.x0, sim.y0, sim,
            directions=tuple(wanted_dirs))
        if "integrability" not in checks:
            suff.lines = [ln for ln in suff.lines if "integrability" not in ln.name]
        reports.append(suff)
    if "a2" in checks:
        reports.append(mc.a2_zero_solution_check(
            prefs, am, im, cs, fd, hgrid, sim.x0, sim.y0, sim))

    n_fail = write_report(cfg.out_dir / "verification_report.txt", comment, reports)
    return exit_code | (1 if n_fail else 0)


def run_example(cfg: ScenarioConfig, comment: str) -> int:
    sec = cfg.section("example")
    params = oracle_ou.OUParams(
        alpha0=_get(sec, "alpha0", float),
        alpha1=_get(sec, "alpha1", float),
        gamma=_get(sec, "gamma", float),
        nu=_get(sec, "nu", float),
        b=_get(sec, "b", float),
        y0=_get(sec, "y0", float),
        lam=_get(sec, "lambda", float),
        rho=_get(sec, "rho", float),
        eta=_get(sec, "eta", float),
        delta=_get(sec, "delta", float),
        horizon=_get(sec, "horizon", float, 1.0),
    )
    y_grid = np.linspace(_get(sec, "y_low", float), _get(sec, "y_high", float),
                         _get(sec, "y_points", int, 50))
    rows = []
    for y in y_grid:
        pi_foc = oracle_ou.ou_foc_portfolio(params, float(y))
        pi_paper = oracle_ou.ou_paper_portfolio(params, float(y))
        rows.append((y, pi_foc, pi_paper, abs(pi_foc - pi_paper)))
    _write_csv(cfg.out_dir / "example_comparison.csv", comment,
               ("y", "pi_foc", "pi_printed_formula", "abs_diff"), rows)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def load_config(path: Path, mode: str | None, seed: int | None, out: str | None,
                allow_assumption_failures: bool) -> ScenarioConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    text = Path(path).read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    run_sec = parser["run"] if "run" in parser else {}
    mode = mode or run_sec.get("mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if seed is None:
        raw_seed = run_sec.get("seed")
        if raw_seed is None:
            raise ConfigError("seed must be given explicitly (config [run] seed or --seed)")
        seed = int(raw_seed)
    if not (0 <= seed < 2 ** 64):
        raise ConfigError("seed must be an unsigned 64-bit integer")
    out_dir = Path(out or run_sec.get("out", "out"))
    digest = hashlib.sha256(text.encode() + str(seed).encode()).hexdigest()[:16]
    return ScenarioConfig(
        mode=mode, seed=seed, out_dir=out_dir,
        allow_assumption_failures=allow_assumption_failures,
        config_hash=digest, parser=parser,
    )


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="jumpvol",
        description="Solve, simulate and verify the optimal "
                    "investment-consumption-insurance scenario in a config file.",
    )
    ap.add_argument("--config", required=True, help="scenario config file (key=value sections)")
    ap.add_argument("--mode", choices=MODES, help="override the configured mode")
    ap.add_argument("--seed", type=int, help="override the configured seed")
    ap.add_argument("--out", help="override the output directory")
    ap.add_argument("--allow-assumption-failures", action="store_true",
                    help="continue even if sampled model assumptions fail")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(Path(args.config), args.mode, args.seed, args.out,
                          args.allow_assumption_failures)
        return run(cfg)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
