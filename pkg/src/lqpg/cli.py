"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (a
``diagnostics.json`` is written to ``--out`` in that case).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bench import run_benchmark
from .config import ConfigError, RunSpec, load_config, preset_spec, resolve
from .model import NumericalError, TimeGrid, validate_model
from .ode import evaluate_cost, optimal_policy, solve_riccati, solve_trajectory
from .pg import PgAborted, PgConfig, mesh_sweep, run_continuous_pg
from .presets import mean_variance_theta0
from .report import emit_report, sweep_rows, sweep_svg, write_manifest

log = logging.getLogger("lqpg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def _spec(args) -> RunSpec:
    if args.config:
        spec = load_config(args.config)
        if args.preset and args.preset != spec.preset:
            raise ConfigError(f"--preset {args.preset!r} conflicts with config preset {spec.preset!r}")
        raw = spec.to_dict()
    else:
        raw = preset_spec(args.preset or "mean-variance").to_dict()
    for flag, key in (("grid", "grid"), ("tau", "tau"), ("epsilon", "epsilon"), ("paths", "num_paths"), ("mode", "mode")):
        v = getattr(args, flag, None)
        if v is not None:
            raw[key] = v
    if getattr(args, "seed", None) is not None:
        raw["seeds"] = [args.seed + i for i in range(raw["repetitions"])]
    if getattr(args, "repetitions", None) is not None:
        raw["repetitions"] = args.repetitions
        if getattr(args, "seed", None) is None:
            raw["seeds"] = list(range(args.repetitions))
        else:
            raw["seeds"] = [args.seed + i for i in range(args.repetitions)]
    return resolve(raw)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj: dict) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args, spec: RunSpec) -> int:
    model = spec.build_model()
    rep = validate_model(model, spec.base_grid())
    _emit({"ok": rep.ok, "violations": list(rep.violations), "delta": rep.delta, "config_hash": spec.config_hash()})
    return EXIT_OK if rep.ok else EXIT_CONFIG


def cmd_riccati(args, spec: RunSpec) -> int:
    model = spec.build_model()
    t0 = time.perf_counter()
    ref = solve_riccati(model, spec.base_grid(), spec.method)
    elapsed = time.perf_counter() - t0
    out = _out(args)
    with open(out / "riccati.csv", "w", newline="") as fh:
        k = model.k
        fh.write("t,P,phi," + ",".join(f"K_{i}" for i in range(k)) + "\n")
        K = np.concatenate([ref.K_step, ref.K_step[-1:]])
        for t, P, phi, Kt in zip(ref.grid.nodes, ref.P_star, ref.phi_star, K):
            fh.write(",".join(repr(float(v)) for v in (t, P.ravel()[0], phi, *Kt.ravel())) + "\n")
    _emit(
        {
            "cstar": ref.optimal_cost,
            "delta_tilde": ref.delta_tilde,
            "strongly_regular": ref.strongly_regular,
            "method": spec.method,
            "intervals": spec.grid,
            "seconds": round(elapsed, 4),
        }
    )
    return EXIT_OK


def cmd_cost(args, spec: RunSpec) -> int:
    model = spec.build_model()
    grid = spec.base_grid()
    theta = mean_variance_theta0(grid, spec.dtd())
    if args.policy == "optimal":
        theta = optimal_policy(model, solve_riccati(model, grid, spec.method))
    cb = evaluate_cost(model, theta, grid, spec.method)
    _emit(
        {
            "policy": args.policy,
            "total": cb.total,
            "quadratic_terminal": cb.quadratic_terminal,
            "running_quadratic": cb.running_quadratic,
            "entropy_term": cb.entropy_term,
            "representation_gap": cb.representation_gap,
        }
    )
    return EXIT_OK


def cmd_pg_run(args, spec: RunSpec) -> int:
    model = spec.build_model()
    grid = spec.base_grid()
    ref = solve_riccati(model, grid, spec.method)
    theta0 = mean_variance_theta0(grid, spec.dtd())
    out = _out(args)
    if spec.mode == "model-based":
        cfg = PgConfig(spec.tau, max_iterations=spec.iterations, stop_epsilon=spec.epsilon, stop_early=False)
        rec = run_continuous_pg(model, theta0, cfg, ref)
    else:
        from .montecarlo import SimConfig, run_model_free_pg

        sim = SimConfig(spec.num_paths, TimeGrid.uniform(spec.model.T, spec.sim_steps), seed=int(spec.seeds[0]))
        cfg = PgConfig(
            spec.tau, max_iterations=spec.mf_iterations, variant="discrete_scaled",
            stop_epsilon=spec.epsilon, stop_early=False, diagnostics_on=False,
        )
        rec = run_model_free_pg(model, theta0, cfg, sim, ref.optimal_cost, gradient="pathwise")
    rec.to_csv(out / "pg_run.csv")
    _emit(
        {
            "mode": spec.mode,
            "cstar": ref.optimal_cost,
            "final_cost": rec.costs[-1],
            "iterations": rec.iterations_run,
            "n_epsilon": rec.n_epsilon,
            "flags": rec.flags() if rec.diagnostics else {},
            "aborted": rec.aborted,
        }
    )
    if rec.aborted is not None:
        raise PgAborted(rec.aborted, rec)
    return EXIT_OK


def cmd_mesh_sweep(args, spec: RunSpec) -> int:
    model = spec.build_model()
    ref = solve_riccati(model, spec.base_grid(), spec.method)
    theta0 = mean_variance_theta0(spec.base_grid(), spec.dtd())
    converged = spec.optimum == "converged"
    table = mesh_sweep(
        model, theta0, spec.mesh_grids(),
        PgConfig(spec.tau, max_iterations=spec.iterations),
        PgConfig(spec.tau_unscaled, max_iterations=spec.unscaled_budget if converged else spec.iterations),
        ref, epsilon=spec.epsilon, tail=spec.tail, optimum=spec.optimum,
    )
    out = _out(args)
    if args.format in ("csv", "both"):
        (out / "mesh_sweep.csv").write_text("\n".join(sweep_rows(table)) + "\n")
    if args.format in ("svg", "both"):
        (out / "mesh_sweep.svg").write_text(sweep_svg(table))
    _emit(
        {
            "optimum": table.optimum,
            "n_reference": table.n_reference,
            "rows": [[r.intervals, r.n_scaled, r.n_unscaled] for r in table.rows],
        }
    )
    return EXIT_OK


def cmd_mc_estimate(args, spec: RunSpec) -> int:
    from .montecarlo import SimConfig, estimate_cost, estimate_covariance, simulate_paths

    model = spec.build_model()
    grid = spec.base_grid()
    ref = solve_riccati(model, grid, spec.method)
    theta = optimal_policy(model, ref) if args.policy == "optimal" else mean_variance_theta0(grid, spec.dtd())
    sim = SimConfig(spec.num_paths, TimeGrid.uniform(spec.model.T, spec.sim_steps), seed=int(spec.seeds[0]))
    ens = simulate_paths(model, theta, sim)
    c = estimate_cost(ens)
    ode_sol = solve_trajectory(model, theta, grid, spec.method)
    ode_cost = 0.5 * float(np.trace(ode_sol.P[0] @ model.Sigma0)) + float(ode_sol.phi[0])
    cov = estimate_covariance(ens, [sim.sim_grid.n])[0]
    out = _out(args)
    ens.to_csv(out / "mc_ensemble.csv")
    _emit(
        {
            "policy": args.policy,
            "paths": spec.num_paths,
            "seed": int(spec.seeds[0]),
            "mc_cost": c.value,
            "std_error": c.std_error,
            "ode_cost": ode_cost,
            "terminal_second_moment": np.ravel(cov.value).tolist(),
            "terminal_second_moment_se": np.ravel(cov.std_error).tolist(),
        }
    )
    return EXIT_OK


def cmd_landscape(args, spec: RunSpec) -> int:
    from .landscape import landscape_suite, noncoercive_closed_form, noncoercive_example_cost

    seed = int(spec.seeds[0])
    cases = landscape_suite(args.cases, args.matrix_cases, seed=seed, method=spec.method)
    out = _out(args)
    with open(out / "landscape.csv", "w", newline="") as fh:
        fh.write("case_id,d,k,check,lhs,rhs,residual,satisfied\n")
        for c in cases:
            for name, r in (("gap", c.gap), ("smoothness", c.smoothness), ("lojasiewicz", c.lojasiewicz)):
                fh.write(f"{c.case_id},{c.d},{c.k},{name},{r.lhs!r},{r.rhs!r},{r.residual!r},{int(r.satisfied)}\n")
    nc = {
        f"eps={e},s={s}": {"numeric": noncoercive_example_cost(e, s), "closed_form": noncoercive_closed_form(e, s)}
        for e, s in ((0.1, 1.0), (0.01, 1.0), (0.1, 0.5))
    }
    _emit(
        {
            "cases": len(cases),
            "gap_max_residual": max(c.gap.residual for c in cases),
            "smoothness_all": all(c.smoothness.satisfied for c in cases),
            "lojasiewicz_all": all(c.lojasiewicz.satisfied for c in cases),
            "noncoercive": nc,
        }
    )
    return EXIT_OK


def cmd_bench(args, spec: RunSpec) -> int:
    out = _out(args)
    bundle = run_benchmark(spec, dry_run=args.dry_run, sweep=not args.no_sweep)
    paths = emit_report(bundle, out, args.format)
    summary = {"written": [p.name for p in paths], "config_hash": spec.config_hash(), "dry_run": args.dry_run}
    if not args.dry_run:
        summary["cstar"] = bundle.cstar
        summary["n_epsilon"] = bundle.n_epsilon
        if bundle.sweep is not None:
            summary["sweep"] = [[r.intervals, r.n_scaled, r.n_unscaled] for r in bundle.sweep.rows]
    _emit(summary)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "riccati": cmd_riccati,
    "cost": cmd_cost,
    "pg-run": cmd_pg_run,
    "mesh-sweep": cmd_mesh_sweep,
    "mc-estimate": cmd_mc_estimate,
    "landscape": cmd_landscape,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--preset", metavar="NAME", help="registered preset (default mean-variance)")
    common.add_argument("--grid", type=int, metavar="N", help="number of policy intervals")
    common.add_argument("--tau", type=float, metavar="X", help="scaled step size")
    common.add_argument("--epsilon", type=float, metavar="X", help="suboptimality target")
    common.add_argument("--seed", type=int, metavar="N", help="first seed; repetitions use consecutive seeds")
    common.add_argument("--paths", type=int, metavar="N", help="Monte Carlo path count")
    common.add_argument("--mode", choices=("model-based", "model-free"))
    common.add_argument("--out", metavar="DIR", default="lqpg-out")
    common.add_argument("--format", choices=("csv", "svg", "both"), default="both")
    common.add_argument("--dry-run", action="store_true", help="write the manifest only")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lqpg", description="Policy gradient for entropy-regularized LQ control.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("cost", "mc-estimate"):
            p.add_argument("--policy", choices=("initial", "optimal"), default="optimal" if name == "mc-estimate" else "initial")
        if name == "landscape":
            p.add_argument("--cases", type=int, default=100, help="scalar cases")
            p.add_argument("--matrix-cases", type=int, default=20, help="d = k = 2 cases")
        if name == "bench":
            p.add_argument("--repetitions", type=int, metavar="N")
            p.add_argument("--no-sweep", action="store_true", help="skip the mesh sweep")
    return parser


def _diagnostics(args, exc: Exception) -> None:
    try:
        out = _out(args)
        info = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        rec = getattr(exc, "record", None)
        if rec is not None:
            info["iterations_completed"] = len(rec.costs)
            info["last_costs"] = rec.costs[-5:]
        bundle = getattr(exc, "bundle", None)
        if bundle is not None:
            write_manifest(bundle, out)
        (out / "diagnostics.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    except OSError:
        pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = _spec(args)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run and args.command != "bench":
        out = _out(args)
        (out / "manifest.json").write_text(json.dumps({"config_hash": spec.config_hash(), "config": spec.to_dict(), "dry_run": True}, indent=2, sort_keys=True) + "\n")
        print(spec.canonical_json(), end="")
        return EXIT_OK
    try:
        return COMMANDS[args.command](args, spec)
    except (NumericalError, PgAborted, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        _diagnostics(args, exc)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
