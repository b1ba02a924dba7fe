"""Experiment driver.

Subcommands: ``solve`` (backward solve with gap history and flatness
report), ``field`` (u(t, x) evaluation, optionally with envelope brackets),
``verify`` (the per-module verification suites), ``compare`` (ordered-pair
comparison), and ``condition-a`` (alias of ``verify condition-a``).

One flat JSON config file describes an experiment; command-line flags win
over the file, and the RBDSDE_OUT environment variable finally overrides the
output directory.  Every run writes a provenance block (config hash, seed,
package version) next to its outputs, and all outputs are byte-reproducible
from (config, seed).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .field import UnsupportedProblemError, evaluate_u_field, solve_doss_eta
from .forward import flow_continuity_test, simulate_forward
from .generators import (builtin_problem, catalog_names, envelope_property_check,
                         expression_generator, shifted_problem)
from .modulus import builtin_condition_a_fixtures, condition_a_uniqueness_check
from .paths import build_grid, sample_noise
from .solver import (RegressionBasis, SolverConfig, comparison_experiment,
                     obstacle_values, picard_solve, skorokhod_residual)
from .paths import empirical_norm

__all__ = ["ExperimentConfig", "main"]

_EXIT_OK = 0
_EXIT_CONFIG = 2
_EXIT_NOCONV = 3
_EXIT_UNSUPPORTED = 4


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass(frozen=True)
class ProblemConfig:
    name: str = "lipschitz-linear"
    overrides: tuple[tuple[str, float], ...] = ()
    f_expr: str | None = None
    g_expr: str | None = None


@dataclass(frozen=True)
class GridConfig:
    T: float = 1.0
    N: int = 50


@dataclass(frozen=True)
class MonteCarloConfig:
    paths: int = 20_000
    seed: int = 7
    b_stream: int = 0


@dataclass(frozen=True)
class BasisConfig:
    kind: str = "local-polynomial"
    degree: int = 1
    bins: int = 16


@dataclass(frozen=True)
class SolverSection:
    picard_tol: float = 1e-4
    picard_max_iter: int = 12
    ridge: float = 1e-8
    z_scheme: str = "regression"


@dataclass(frozen=True)
class FieldConfig:
    x_min: float = -1.0
    x_max: float = 1.0
    x_points: int = 5
    times: tuple[float, ...] = (0.0,)
    envelope_n: tuple[int, ...] = ()


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    reports: tuple[str, ...] = ("solution", "diagnostics")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    monte_carlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    solver: SolverSection = field(default_factory=SolverSection)
    field_eval: FieldConfig = field(default_factory=FieldConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    threads: int = 1

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["problem"]["overrides"] = [list(kv) for kv in self.problem.overrides]
        return out

    def render(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.render().encode()).hexdigest()

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        def build(cls, section, name):
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(cls)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown field {sorted(bad)[0]!r} in section {name!r}")
            fixed = dict(section)
            for key, val in list(fixed.items()):
                if isinstance(val, list):
                    fixed[key] = tuple(tuple(v) if isinstance(v, list) else v for v in val)
            return cls(**fixed)

        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        bad = set(data) - known
        if bad:
            raise ConfigError(f"unknown top-level field {sorted(bad)[0]!r}")
        kwargs = {}
        for name, cls in (("problem", ProblemConfig), ("grid", GridConfig),
                          ("monte_carlo", MonteCarloConfig), ("basis", BasisConfig),
                          ("solver", SolverSection), ("field_eval", FieldConfig),
                          ("outputs", OutputConfig)):
            if name in data:
                kwargs[name] = build(cls, data[name], name)
        if "threads" in data:
            kwargs["threads"] = int(data["threads"])
        return ExperimentConfig(**kwargs)

    @staticmethod
    def parse(text: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# assembly


def _assemble(cfg: ExperimentConfig):
    # grid.T is the experiment horizon; catalog entries are built to match it
    overrides = dict(cfg.problem.overrides)
    if "horizon" in overrides and abs(overrides["horizon"] - cfg.grid.T) > 1e-12:
        raise ConfigError("problem horizon override conflicts with grid.T")
    overrides["horizon"] = cfg.grid.T
    try:
        problem = builtin_problem(cfg.problem.name, **overrides)
    except KeyError as e:
        raise ConfigError(str(e)) from None
    except TypeError as e:
        raise ConfigError(f"bad problem override: {e}") from None
    if cfg.problem.f_expr or cfg.problem.g_expr:
        gen = problem.generators
        f_src = cfg.problem.f_expr or "0"
        g_src = cfg.problem.g_expr or "0"
        expr_gen = expression_generator(f_src, g_src, gen.modulus,
                                        z_lipschitz=gen.z_lipschitz,
                                        z_fraction=gen.z_fraction)
        problem = dataclasses.replace(problem, generators=expr_gen)
    grid = build_grid(cfg.grid.T, cfg.grid.N)
    noise = sample_noise(grid, cfg.monte_carlo.paths, d=problem.dim,
                         ell=problem.generators.ell, seed=cfg.monte_carlo.seed,
                         b_stream=cfg.monte_carlo.b_stream)
    basis = RegressionBasis(kind=cfg.basis.kind, degree=cfg.basis.degree,
                            bins=cfg.basis.bins)
    solver_cfg = SolverConfig(picard_tol=cfg.solver.picard_tol,
                              picard_max_iter=cfg.solver.picard_max_iter,
                              ridge=cfg.solver.ridge, z_scheme=cfg.solver.z_scheme)
    return problem, grid, noise, basis, solver_cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    directory = os.environ.get("RBDSDE_OUT", cfg.outputs.directory)
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_provenance(cfg: ExperimentConfig, out: Path) -> None:
    block = {"config_hash": cfg.config_hash(), "seed": cfg.monte_carlo.seed,
             "package_version": __version__}
    (out / "provenance.json").write_text(json.dumps(block, sort_keys=True, indent=2) + "\n")
    (out / "config.json").write_text(cfg.render())


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: ExperimentConfig) -> int:
    problem, grid, noise, basis, solver_cfg = _assemble(cfg)
    fwd = simulate_forward(problem, 0.0, problem.spot, noise)
    sol, iterations, history = picard_solve(problem, fwd, noise, basis, solver_cfg)
    out = _out_dir(cfg)
    _write_provenance(cfg, out)

    lines = ["iteration,node,t,mean_Y,mean_Z_norm,mean_K,gap,skorokhod_partial"]
    for it, summary in enumerate(sol.diagnostics["iteration_summaries"], start=1):
        for i in range(grid.num_steps + 1):
            lines.append(",".join([
                str(it), str(i), _fmt(grid.nodes[i]),
                _fmt(summary["mean_y"][i]), _fmt(summary["mean_z_norm"][i]),
                _fmt(summary["mean_k"][i]), _fmt(summary["gap_profile"][i]),
                _fmt(summary["skorokhod_partial"][i]),
            ]))
    (out / "run.csv").write_text("\n".join(lines) + "\n")

    diag = sol.diagnostics
    text = [
        f"problem: {problem.name}",
        f"converged: {diag['converged']}",
        f"iterations: {diag['iterations']}",
        f"final_gap: {_fmt(history[-1])}",
        f"skorokhod_residual: {_fmt(diag['skorokhod_residual'])}",
        f"y0_mean: {_fmt(float(np.mean(sol.y.values[:, 0, 0])))}",
        f"k_terminal_mean: {_fmt(float(np.mean(sol.k.values[:, -1, 0])))}",
        f"seed: {cfg.monte_carlo.seed}",
        f"config_hash: {cfg.config_hash()}",
    ]
    (out / "diagnostics.txt").write_text("\n".join(text) + "\n")
    if not diag["converged"]:
        print(f"solver did not converge in {iterations} iterations "
              f"(final gap {history[-1]:.3e}); outputs written to {out}", file=sys.stderr)
        return _EXIT_NOCONV
    print(f"solved {problem.name}: {iterations} iterations, outputs in {out}")
    return _EXIT_OK


def cmd_field(cfg: ExperimentConfig) -> int:
    problem, grid, noise, basis, solver_cfg = _assemble(cfg)
    fc = cfg.field_eval
    xs = np.linspace(fc.x_min, fc.x_max, fc.x_points)
    times = [grid.nodes[grid.index_of(t)] for t in fc.times]
    try:
        sample = evaluate_u_field(problem, xs, times, noise, basis, solver_cfg)
        envelopes = {}
        for n in fc.envelope_n:
            from .generators import lipschitz_envelope
            lo = lipschitz_envelope(problem.generators, n, "lower")
            up = lipschitz_envelope(problem.generators, n, "upper")
            envelopes[n] = (
                evaluate_u_field(dataclasses.replace(problem, generators=lo.as_generator()),
                                 xs, times, noise, basis, solver_cfg),
                evaluate_u_field(dataclasses.replace(problem, generators=up.as_generator()),
                                 xs, times, noise, basis, solver_cfg),
            )
    except UnsupportedProblemError as e:
        print(f"unsupported problem: {e}", file=sys.stderr)
        return _EXIT_UNSUPPORTED
    out = _out_dir(cfg)
    _write_provenance(cfg, out)

    header = ["t"] + [f"x{j}" for j in range(problem.dim)] + ["u"]
    for n in fc.envelope_n:
        header += [f"u_lower_{n}", f"u_upper_{n}"]
    lines = [",".join(header)]
    for a, t in enumerate(sample.time_nodes):
        for j in range(len(sample.space_points)):
            row = [_fmt(t)] + [_fmt(v) for v in sample.space_points[j]]
            row.append(_fmt(sample.values[a, j]))
            for n in fc.envelope_n:
                lo, up = envelopes[n]
                row += [_fmt(lo.values[a, j]), _fmt(up.values[a, j])]
            lines.append(",".join(row))
    (out / "field.csv").write_text("\n".join(lines) + "\n")
    print(f"field written to {out / 'field.csv'}")
    return _EXIT_OK


def _suite_condition_a(cfg: ExperimentConfig):
    ladder = [10.0 ** (-k) for k in range(2, 13)]
    checks = []
    for name, (spec, expected) in builtin_condition_a_fixtures().items():
        rep = condition_a_uniqueness_check(spec, M=1.0, T=1.0, eps_ladder=ladder)
        checks.append((f"condition-a.{name}", rep.verdict == expected,
                       f"verdict={rep.verdict} expected={expected}"))
    return checks


def _suite_envelopes(cfg: ExperimentConfig):
    problem = builtin_problem("paper-1-4")
    rep = envelope_property_check(problem.generators, [4, 8], num_points=2000,
                                  u_range=20.0, u_step=1e-3,
                                  growth_phi=2.0, growth_c=2.0)
    names = ["sandwich", "monotone", "growth", "xy_lipschitz", "z_lipschitz", "converges"]
    flags = [rep.sandwich_ok, rep.monotone_ok, rep.growth_ok,
             rep.xy_lipschitz_ok, rep.z_lipschitz_ok, rep.converges_ok]
    return [(f"envelopes.{n}", bool(ok), f"max_violation={rep.max_violation:.3e}")
            for n, ok in zip(names, flags)]


def _suite_comparison(cfg: ExperimentConfig):
    problem = builtin_problem("lipschitz-linear")
    grid = build_grid(problem.horizon, 32)
    noise = sample_noise(grid, 4000, seed=1801)
    fwd = simulate_forward(problem, 0.0, problem.spot, noise)
    basis = RegressionBasis(kind="local-polynomial", bins=8, degree=1)
    solver_cfg = SolverConfig()
    checks = []
    for kind, amount in (("terminal", 1.0), ("obstacle", 0.5), ("generator", 0.5)):
        other = shifted_problem(problem, kind, amount)
        rep = comparison_experiment(problem, other, fwd, noise, basis, solver_cfg)
        checks.append((f"comparison.{kind}-shift", rep.within(3.0),
                       f"max_mean_pos={rep.max_mean_positive_part:.3e}"))
    return checks


def _suite_skorokhod(cfg: ExperimentConfig):
    problem = builtin_problem("american-put-like")
    grid = build_grid(problem.horizon, 50)
    noise = sample_noise(grid, 5000, seed=1802)
    fwd = simulate_forward(problem, 0.0, problem.spot, noise)
    basis = RegressionBasis(kind="local-polynomial", bins=16, degree=1)
    sol, _, _ = picard_solve(problem, fwd, noise, basis, SolverConfig())
    obstacle = obstacle_values(problem, fwd)
    residual = skorokhod_residual(sol, obstacle)
    yv = sol.y.values[:, :, 0]
    bound = 1e-2 * empirical_norm(sol.y, "S2") * float(np.mean(sol.k.values[:, -1, 0]))
    dominance = float(np.min(yv - obstacle))
    dk = np.diff(sol.k.values[:, :, 0], axis=1)
    off_contact = int(np.sum((yv[:, :-1] > obstacle[:, :-1] + 1e-12) & (dk > 0)))
    return [
        ("skorokhod.residual", residual <= bound, f"residual={residual:.3e} bound={bound:.3e}"),
        ("skorokhod.dominance", dominance >= -1e-12, f"min(Y-S)={dominance:.3e}"),
        ("skorokhod.minimal-push", off_contact == 0, f"pushes_off_contact={off_contact}"),
    ]


def _suite_doss(cfg: ExperimentConfig):
    problem = builtin_problem("lipschitz-linear")
    grid = build_grid(1.0, 40)
    noise = sample_noise(grid, 1, seed=1803)
    ys = np.linspace(-2.0, 2.0, 41)
    ident = solve_doss_eta(problem.generators, grid, [0.0], ys, noise.b_increments)
    err_id = float(np.max(np.abs(ident.eta - ys[None, None, :])))
    gen_c = dataclasses.replace(problem.generators,
                                g=lambda t, x, y, z: np.full((len(y), 1), 0.7))
    dc = solve_doss_eta(gen_c, grid, [0.0], ys, noise.b_increments)
    bpath = np.concatenate([[0.0], np.cumsum(noise.b_increments[:, 0])])
    expect = ys[None, None, :] + 0.7 * (bpath[-1] - bpath)[:, None, None]
    err_c = float(np.max(np.abs(dc.eta - expect)))
    return [
        ("doss.zero-g-identity", err_id == 0.0, f"max_err={err_id:.3e}"),
        ("doss.constant-g-closed-form", err_c <= 1e-12, f"max_err={err_c:.3e}"),
        ("doss.inverse-at-knots", dc.inverse_identity_error() <= 1e-12, "interpolated inverse"),
    ]


def _suite_flow(cfg: ExperimentConfig):
    problem = builtin_problem("lipschitz-linear")
    grid = build_grid(1.0, 256)
    noise = sample_noise(grid, 4000, seed=1804)
    spatial = flow_continuity_test(problem, (0.0, [0.0]), (0.0, [1.0]), 2, noise)
    temporal = flow_continuity_test(problem, (0.0, [0.0]), (0.5, [0.0]), 2, noise)
    slope_err = abs(temporal.slope - 1.0)
    return [
        ("flow.spatial-ratio-stable", spatial.stable,
         f"ratios={np.round(spatial.ratios, 4).tolist()}"),
        ("flow.temporal-slope", slope_err <= 0.15,
         f"slope={temporal.slope:.3f} target=1.0"),
    ]


_SUITES = {
    "condition-a": _suite_condition_a,
    "envelopes": _suite_envelopes,
    "comparison": _suite_comparison,
    "skorokhod": _suite_skorokhod,
    "doss": _suite_doss,
    "flow": _suite_flow,
}


def cmd_verify(cfg: ExperimentConfig, suite: str) -> int:
    if suite not in _SUITES:
        print(f"unknown suite {suite!r}; available: {', '.join(sorted(_SUITES))}",
              file=sys.stderr)
        return _EXIT_CONFIG
    checks = _SUITES[suite](cfg)
    out = _out_dir(cfg)
    lines = []
    for name, ok, detail in checks:
        lines.append(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
        print(lines[-1])
    (out / f"verify_{suite}.txt").write_text("\n".join(lines) + "\n")
    return _EXIT_OK if all(ok for _, ok, _ in checks) else 1


def cmd_compare(cfg: ExperimentConfig, kind: str, amount: float) -> int:
    problem, grid, noise, basis, solver_cfg = _assemble(cfg)
    fwd = simulate_forward(problem, 0.0, problem.spot, noise)
    other = shifted_problem(problem, kind, amount)
    rep = comparison_experiment(problem, other, fwd, noise, basis, solver_cfg)
    out = _out_dir(cfg)
    _write_provenance(cfg, out)
    lines = [
        f"shift: {kind} by {amount}",
        f"max_mean_positive_part: {_fmt(rep.max_mean_positive_part)}",
        f"violation_fraction: {_fmt(rep.violation_fraction)}",
        f"within_3_stderr: {rep.within(3.0)}",
    ]
    (out / "compare.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return _EXIT_OK if rep.within(3.0) else 1


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbdsde",
                                     description="reflected backward doubly stochastic "
                                                 "solver and verification lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--problem", type=str, default=None,
                       help=f"catalog problem ({', '.join(catalog_names())})")
        p.add_argument("--T", type=float, default=None, help="horizon")
        p.add_argument("--N", type=int, default=None, help="time steps")
        p.add_argument("--paths", type=int, default=None, help="Monte Carlo paths")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--basis", type=str, default=None,
                       help="polynomial | piecewise-constant | local-polynomial")
        p.add_argument("--degree", type=int, default=None, help="basis degree")
        p.add_argument("--bins", type=int, default=None, help="basis bins")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (results are independent of it)")

    p_solve = sub.add_parser("solve", help="run the backward solver")
    common(p_solve)

    p_field = sub.add_parser("field", help="evaluate the u(t, x) field")
    common(p_field)
    p_field.add_argument("--x-min", type=float, default=None)
    p_field.add_argument("--x-max", type=float, default=None)
    p_field.add_argument("--x-points", type=int, default=None)
    p_field.add_argument("--times", type=float, nargs="+", default=None)
    p_field.add_argument("--envelope-n", type=int, nargs="+", default=None)

    p_verify = sub.add_parser("verify", help="run a verification suite")
    common(p_verify)
    p_verify.add_argument("suite", type=str,
                          help=f"one of: {', '.join(sorted(_SUITES))}")

    p_cond = sub.add_parser("condition-a", help="alias of 'verify condition-a'")
    common(p_cond)

    p_cmp = sub.add_parser("compare", help="ordered-pair comparison experiment")
    common(p_cmp)
    p_cmp.add_argument("--shift", type=str, default="terminal",
                       choices=("terminal", "obstacle", "generator"))
    p_cmp.add_argument("--amount", type=float, default=1.0)
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
        try:
            cfg = ExperimentConfig.parse(text)
        except json.JSONDecodeError as e:
            raise ConfigError(
                f"config parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    else:
        cfg = ExperimentConfig()

    problem = cfg.problem if args.problem is None else dataclasses.replace(
        cfg.problem, name=args.problem)
    grid = cfg.grid
    if args.T is not None:
        grid = dataclasses.replace(grid, T=args.T)
    if args.N is not None:
        grid = dataclasses.replace(grid, N=args.N)
    mc = cfg.monte_carlo
    if args.paths is not None:
        mc = dataclasses.replace(mc, paths=args.paths)
    if args.seed is not None:
        mc = dataclasses.replace(mc, seed=args.seed)
    basis = cfg.basis
    if args.basis is not None:
        basis = dataclasses.replace(basis, kind=args.basis)
    if args.degree is not None:
        basis = dataclasses.replace(basis, degree=args.degree)
    if getattr(args, "bins", None) is not None:
        basis = dataclasses.replace(basis, bins=args.bins)
    outputs = cfg.outputs
    if args.out is not None:
        outputs = dataclasses.replace(outputs, directory=args.out)
    fld = cfg.field_eval
    for flag, name in (("x_min", "x_min"), ("x_max", "x_max"), ("x_points", "x_points")):
        val = getattr(args, flag, None)
        if val is not None:
            fld = dataclasses.replace(fld, **{name: val})
    if getattr(args, "times", None) is not None:
        fld = dataclasses.replace(fld, times=tuple(args.times))
    if getattr(args, "envelope_n", None) is not None:
        fld = dataclasses.replace(fld, envelope_n=tuple(args.envelope_n))
    threads = cfg.threads if args.threads is None else args.threads
    return ExperimentConfig(problem=problem, grid=grid, monte_carlo=mc, basis=basis,
                            solver=cfg.solver, field_eval=fld, outputs=outputs,
                            threads=threads)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "field":
            return cmd_field(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.suite)
        if args.command == "condition-a":
            return cmd_verify(cfg, "condition-a")
        if args.command == "compare":
            return cmd_compare(cfg, args.shift, args.amount)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return _EXIT_CONFIG
    except ValueError as e:
        print(f"invalid arguments: {e}", file=sys.stderr)
        return _EXIT_CONFIG
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
