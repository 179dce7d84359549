"""Benchmark orchestration: convergence traces and the mesh sweep for one spec."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunSpec
from .model import NumericalError, TimeGrid
from .montecarlo import SimConfig, run_model_free_pg
from .ode import cost, solve_riccati
from .pg import PgAborted, PgConfig, SweepTable, mesh_sweep, run_continuous_pg
from .presets import mean_variance_theta0

log = logging.getLogger(__name__)

SPREAD_NOTE = "spread = pointwise min/max over repetitions (range, not standard deviation)"


@dataclass
class ReportBundle:
    """Results of one benchmark run, ready for :func:`lqpg.report.emit_report`.

    ``traces`` holds one cost trace per repetition.  Model-based traces are
    deterministic, so that mode stores a single trace.
    """

    spec: RunSpec
    cstar: float | None = None
    delta_tilde: float | None = None
    traces: list = field(default_factory=list)
    exact_traces: list = field(default_factory=list)
    n_epsilon: int | None = None
    sweep: SweepTable | None = None
    status: str = "ok"
    error: str | None = None
    dry_run: bool = False

    def manifest(self) -> dict:
        s = self.spec
        out = {
            "config_hash": s.config_hash(),
            "config": s.to_dict(),
            "mode": s.mode,
            "seeds": list(s.seeds[: s.repetitions]) if s.mode == "model-free" else [],
            "status": self.status,
            "dry_run": self.dry_run,
            "spread": SPREAD_NOTE,
        }
        if self.cstar is not None:
            out["cstar_riccati"] = self.cstar
            out["delta_tilde"] = self.delta_tilde
        if self.traces:
            out["repetitions_completed"] = len(self.traces)
            out["n_epsilon_reference"] = self.n_epsilon
        if self.sweep is not None:
            out["sweep_optimum_protocol"] = self.sweep.optimum
            out["sweep_n_reference"] = self.sweep.n_reference
        if self.error is not None:
            out["error"] = self.error
        return out

    def stacked(self, exact: bool = False) -> np.ndarray:
        """Traces padded with NaN to a common length, shape (repetitions, iterations)."""
        traces = self.exact_traces if exact else self.traces
        if not traces:
            return np.zeros((0, 0))
        n = max(len(t) for t in traces)
        out = np.full((len(traces), n), np.nan)
        for i, t in enumerate(traces):
            out[i, : len(t)] = t
        return out


def run_benchmark(spec: RunSpec, dry_run: bool = False, sweep: bool = True) -> ReportBundle:
    """Convergence run(s) on ``spec.grid`` and the scaled/unscaled mesh sweep.

    On a numerical failure the partially filled bundle is attached to the
    raised exception as ``exc.bundle`` with ``status="failed"``.
    """
    bundle = ReportBundle(spec=spec, dry_run=dry_run)
    if dry_run:
        return bundle
    model = spec.build_model()
    grid = spec.base_grid()
    try:
        ref = solve_riccati(model, grid, spec.method)
        bundle.cstar = ref.optimal_cost
        bundle.delta_tilde = ref.delta_tilde
        theta0 = mean_variance_theta0(grid, spec.dtd())
        if spec.mode == "model-based":
            cfg = PgConfig(spec.tau, max_iterations=spec.iterations, stop_epsilon=spec.epsilon, stop_early=False)
            rec = run_continuous_pg(model, theta0, cfg, ref)
            bundle.traces.append(list(rec.costs))
            bundle.n_epsilon = rec.n_epsilon
            if rec.aborted is not None:
                raise PgAborted(rec.aborted, rec)
        else:
            cfg = PgConfig(
                spec.tau,
                max_iterations=spec.mf_iterations,
                variant="discrete_scaled",
                stop_epsilon=spec.epsilon,
                stop_early=False,
                diagnostics_on=False,
            )
            sim_grid = TimeGrid.uniform(spec.model.T, spec.sim_steps)
            for seed in spec.seeds[: spec.repetitions]:
                sim = SimConfig(num_paths=spec.num_paths, sim_grid=sim_grid, seed=int(seed))
                rec = run_model_free_pg(
                    model, theta0, cfg, sim, ref.optimal_cost, gradient="pathwise",
                    true_cost=lambda th: cost(model, th, grid, spec.method),
                )
                bundle.traces.append(list(rec.costs))
                bundle.exact_traces.append(list(rec.iterates))
                if rec.aborted is not None:
                    raise PgAborted(f"seed {seed}: {rec.aborted}", rec)
                log.info("model-free repetition seed=%d done (%d iterations)", seed, rec.iterations_run)
            # reference count from the exact costs of the first repetition
            hit = np.nonzero(np.asarray(bundle.exact_traces[0]) - ref.optimal_cost < spec.epsilon)[0]
            bundle.n_epsilon = int(hit[0]) if hit.size else None
        if sweep:
            converged = spec.optimum == "converged"
            scaled = PgConfig(spec.tau, max_iterations=spec.iterations)
            unscaled = PgConfig(spec.tau_unscaled, max_iterations=spec.unscaled_budget if converged else spec.iterations)
            bundle.sweep = mesh_sweep(
                model, theta0, spec.mesh_grids(), scaled, unscaled, ref,
                epsilon=spec.epsilon, tail=spec.tail, optimum=spec.optimum,
            )
    except NumericalError as exc:
        bundle.status = "failed"
        bundle.error = str(exc)
        exc.bundle = bundle
        raise
    return bundle


__all__ = ["ReportBundle", "SPREAD_NOTE", "run_benchmark"]
