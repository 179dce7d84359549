"""Geometry-aware policy-gradient iterations.

The update direction for ``K`` is the Fisher (natural) gradient ``D_K`` and
for ``V`` the Bures-Wasserstein direction ``D_V V + V D_V``.  Three variants
share one loop:

``continuous``
    one update per solver step, ``K <- K - tau D_K``.
``discrete_scaled``
    piecewise-constant policy on a coarse grid; per-interval gradients are
    divided by the interval length and right-preconditioned by ``Sigma^-1``
    at the interval's left node.
``discrete_unscaled``
    the same without the division by the interval length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .gradient import GradientField, bw_gradient_V, gradient_field
from .model import (
    DiagnosticsRecord,
    LqcModel,
    NumericalError,
    Policy,
    TimeGrid,
    sym,
)
from .ode import RiccatiSolution, gain_matrix, optimal_policy, solve_trajectory

log = logging.getLogger(__name__)

VARIANTS = ("continuous", "discrete_scaled", "discrete_unscaled")


@dataclass(frozen=True)
class PgConfig:
    tau: float
    max_iterations: int = 1000
    variant: str = "continuous"
    stop_epsilon: float = 1e-2
    diagnostics_on: bool = True
    stop_early: bool = True  # stop at the first iterate with subopt < stop_epsilon
    loewner_tol: float = 1e-8
    keep_iterates: bool = False
    pinv_diagnostic: bool = False  # continue with a pseudo-inverse if V degenerates

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.stop_epsilon > 0:
            raise ValueError("stop_epsilon must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class RunRecord:
    """Per-iteration trace of a PG run; index ``n`` refers to iterate ``theta^n``."""

    variant: str
    tau: float
    reference_optimum: float
    costs: list = field(default_factory=list)
    grad_k_l2: list = field(default_factory=list)
    grad_v_l2: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    stop_epsilon: float = 1e-2
    aborted: str | None = None
    lambda0_bar: float = float("nan")
    delta_tilde: float = float("nan")
    v_envelope: tuple = (float("nan"), float("nan"))
    k_bound: float = float("nan")
    k_bound_lambda0: float = float("nan")

    @property
    def subopt(self) -> np.ndarray:
        return np.asarray(self.costs) - self.reference_optimum

    @property
    def iterations_run(self) -> int:
        return max(len(self.costs) - 1, 0)

    @property
    def n_epsilon(self) -> int | None:
        return iterations_to_tolerance(self, self.stop_epsilon)

    @property
    def reached_epsilon(self) -> bool:
        return self.n_epsilon is not None

    def flags(self) -> dict:
        """Aggregate diagnostic flags over the run (True = held at every iterate)."""
        diags = self.diagnostics
        return {
            "cost_monotone": bool(np.all(np.diff(self.costs) <= 1e-12 * max(1.0, abs(self.costs[0])))) if self.costs else True,
            "p_monotone": all(x.p_monotone for x in diags),
            "p_above_opt": all(x.p_above_opt for x in diags),
            "v_in_envelope": all(x.v_in_envelope for x in diags),
            "k_in_bound": all(x.k_in_bound for x in diags),
            "in_theta": self.aborted is None,
        }

    def to_csv(self, path) -> None:
        cols = "iter,cost,subopt,gradK_l2,gradV_l2,minEigV,maxEigV,minEigSigma,p_monotone_flag\n"
        with open(path, "w", newline="") as fh:
            fh.write(cols)
            for n, c in enumerate(self.costs):
                dg = self.diagnostics[n] if n < len(self.diagnostics) else None
                row = [
                    str(n),
                    repr(float(c)),
                    repr(float(c - self.reference_optimum)),
                    repr(float(self.grad_k_l2[n])),
                    repr(float(self.grad_v_l2[n])),
                    repr(dg.v_eig_min) if dg else "",
                    repr(dg.v_eig_max) if dg else "",
                    repr(dg.sigma_eig_min) if dg else "",
                    str(int(dg.p_monotone)) if dg else "",
                ]
                fh.write(",".join(row) + "\n")


class PgAborted(NumericalError):
    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def npg_step(
    model: LqcModel,
    theta: Policy,
    tau: float,
    field_: GradientField | None = None,
    grid: TimeGrid | None = None,
) -> Policy:
    """One natural-gradient step ``K - tau D_K``, ``V - tau (D_V V + V D_V)``.

    The solver grid defaults to the policy grid.  On a finer solver grid the
    step-wise fields are averaged over each policy interval.  The result is
    built without validation; check ``in_theta`` to see whether ``V`` left
    the positive-definite cone.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if field_ is None:
        field_ = gradient_field(model, theta, grid=grid or theta.grid)
    if field_.grid == theta.grid:
        DK, DV_bw = field_.DK, field_.DV_bw
    else:
        idx = theta.grid.interval_of(field_.grid.left)
        h = field_.grid.steps[:, None, None]
        DK = np.zeros_like(theta.K)
        DV = np.zeros_like(theta.V)
        np.add.at(DK, idx, h * field_.DK)
        np.add.at(DV, idx, h * field_.DV)
        w = theta.grid.steps[:, None, None]
        DK, DV_bw = DK / w, bw_gradient_V(DV / w, theta.V)
    return theta.with_values(theta.K - tau * DK, sym(theta.V - tau * DV_bw))


def _safe_inv(M: np.ndarray, pinv: bool) -> np.ndarray:
    """Inverse of a stack of symmetric matrices; pseudo-inverse only if ``pinv``."""
    w = np.linalg.eigvalsh(M)
    if np.any(w <= 1e-14 * max(1.0, float(np.abs(w).max()))):
        if pinv:
            return np.linalg.pinv(M, hermitian=True)
        raise NumericalError(f"state second moment is singular (min eigenvalue {w.min():.3e})")
    return np.linalg.inv(M)


def discrete_step(
    theta: Policy,
    field_: GradientField,
    tau: float,
    scaled: bool = True,
    pinv: bool = False,
) -> Policy:
    """Per-interval update of a piecewise-constant policy from exact interval gradients."""
    gK, gV = field_.interval_integrals(theta.grid)
    idx = np.searchsorted(field_.grid.left, theta.grid.left - 1e-12 * theta.grid.T)
    Sigma_left = field_.Sigma[np.clip(idx, 0, field_.Sigma.shape[0] - 1)]
    step = tau / theta.grid.steps if scaled else np.full(theta.grid.n, tau)
    step = step[:, None, None]
    Sigma_inv = _safe_inv(Sigma_left, pinv)
    K = theta.K - step * (gK @ Sigma_inv)
    V = sym(theta.V - step * bw_gradient_V(gV, theta.V))
    return theta.with_values(K, V)


# ---------------------------------------------------------------------------
# the iteration loop
# ---------------------------------------------------------------------------


def _node_match(fine: TimeGrid, coarse_nodes: np.ndarray) -> np.ndarray | None:
    idx = np.searchsorted(fine.nodes, coarse_nodes - 1e-12 * fine.T)
    idx = np.clip(idx, 0, fine.n)
    if np.all(np.abs(fine.nodes[idx] - coarse_nodes) <= 1e-12 * max(1.0, fine.T)):
        return idx
    return None


def _loewner_geq(A: np.ndarray, B: np.ndarray, tol: float) -> bool:
    w = np.linalg.eigvalsh(sym(A - B))
    return bool(w.min() >= -tol)


def _b_norm(model: LqcModel, grid: TimeGrid, P: np.ndarray) -> float:
    """``L2`` norm of ``B^T P + sum_j D_j^T P C_j + S`` along the solver grid."""
    c = model.coefficients(grid.left)
    Pl = P[:-1]
    b = np.swapaxes(c.B, 1, 2) @ Pl + np.einsum("npik,nij,npjl->nkl", c.D, Pl, c.C) + c.S
    return float(np.sqrt(np.sum(grid.steps * np.sum(b**2, axis=(1, 2)))))


def _run(
    model: LqcModel,
    theta0: Policy,
    config: PgConfig,
    reference: RiccatiSolution | None,
    solver_grid: TimeGrid,
    reference_optimum: float | None,
    update: Callable[[Policy, GradientField], Policy],
) -> RunRecord:
    if reference_optimum is None:
        if reference is None:
            raise ValueError("need a reference Riccati solution or a reference optimum")
        reference_optimum = reference.optimal_cost
    rec = RunRecord(
        variant=config.variant, tau=config.tau, reference_optimum=reference_optimum, stop_epsilon=config.stop_epsilon
    )
    p_star = None
    if reference is not None:
        idx = _node_match(reference.grid, solver_grid.nodes)
        if idx is not None:
            p_star = reference.P_star[idx]
        rec.delta_tilde = reference.delta_tilde

    theta = theta0
    prev_P = None
    k0_l2 = theta0.k_l2()
    b_sup = 0.0
    for n in range(config.max_iterations + 1):
        try:
            sol = solve_trajectory(model, theta, solver_grid)
        except NumericalError as exc:
            rec.aborted = f"iteration {n}: {exc}"
            raise PgAborted(rec.aborted, rec) from exc
        c = 0.5 * float(np.trace(sol.P[0] @ model.Sigma0)) + float(sol.phi[0])
        if not np.isfinite(c):
            rec.aborted = f"iteration {n}: non-finite cost"
            raise PgAborted(rec.aborted, rec)
        fld = gradient_field(model, theta, solution=sol)
        gk, gv = fld.l2_norms()
        rec.costs.append(c)
        rec.grad_k_l2.append(gk)
        rec.grad_v_l2.append(gv)
        if config.keep_iterates:
            rec.iterates.append(theta)

        if config.diagnostics_on:
            if n == 0:
                gains = gain_matrix(model, solver_grid.nodes, sol.P)
                rec.lambda0_bar = float(np.linalg.eigvalsh(gains)[:, -1].max())
                ev0 = np.linalg.eigvalsh(theta0.V)
                lo = min(float(ev0.min()), model.rho / rec.lambda0_bar)
                hi = max(float(ev0.max()), model.rho / rec.delta_tilde) if rec.delta_tilde > 0 else np.inf
                rec.v_envelope = (lo, hi)
            b_sup = max(b_sup, _b_norm(model, solver_grid, sol.P))
            rec.k_bound = k0_l2 + b_sup / rec.delta_tilde if rec.delta_tilde > 0 else np.inf
            rec.k_bound_lambda0 = k0_l2 + b_sup / rec.lambda0_bar
            ev = np.linalg.eigvalsh(theta.V)
            es = np.linalg.eigvalsh(sol.Sigma)
            tol = config.loewner_tol
            lo, hi = rec.v_envelope
            rec.diagnostics.append(
                DiagnosticsRecord(
                    iteration=n,
                    cost=c,
                    k_l2=theta.k_l2(),
                    v_eig_min=float(ev.min()),
                    v_eig_max=float(ev.max()),
                    sigma_eig_min=float(es.min()),
                    sigma_eig_max=float(es.max()),
                    p_monotone=True if prev_P is None else _loewner_geq(prev_P, sol.P, tol),
                    p_above_opt=True if p_star is None else _loewner_geq(sol.P, p_star, tol),
                    lambda0_bar=rec.lambda0_bar,
                    delta_tilde=rec.delta_tilde,
                    v_in_envelope=bool(ev.min() >= lo - tol and ev.max() <= hi + tol),
                    k_in_bound=bool(theta.k_l2() <= rec.k_bound + tol),
                )
            )
            prev_P = sol.P

        if config.stop_early and c - reference_optimum < config.stop_epsilon:
            break
        if n == config.max_iterations:
            break
        theta = update(theta, fld)
        if not theta.in_theta and not config.pinv_diagnostic:
            rec.aborted = f"iteration {n + 1}: covariance left the positive-definite cone"
            log.warning(rec.aborted)
            break
    return rec


def run_continuous_pg(
    model: LqcModel,
    theta0: Policy,
    config: PgConfig,
    reference: RiccatiSolution | None = None,
    reference_optimum: float | None = None,
) -> RunRecord:
    """Natural-gradient iteration with one update per step of ``theta0.grid`` (also the solver grid)."""
    grid = theta0.grid

    def update(theta, fld):
        return theta.with_values(theta.K - config.tau * fld.DK, sym(theta.V - config.tau * fld.DV_bw))

    return _run(model, theta0, replace(config, variant="continuous"), reference, grid, reference_optimum, update)


def run_discrete_pg(
    model: LqcModel,
    theta0: Policy,
    config: PgConfig,
    reference: RiccatiSolution | None = None,
    solver_grid: TimeGrid | None = None,
    reference_optimum: float | None = None,
) -> RunRecord:
    """Mesh-parameterized iteration for a policy that is piecewise constant on ``theta0.grid``.

    Gradients are integrated exactly over every policy interval on
    ``solver_grid`` (default: ``reference.grid`` if given, else the policy
    grid refined 8 times).
    """
    if config.variant not in ("discrete_scaled", "discrete_unscaled"):
        raise ValueError("run_discrete_pg needs a discrete variant")
    if solver_grid is None:
        solver_grid = reference.grid if reference is not None else theta0.grid.refine(8)
    if not solver_grid.is_refinement_of(theta0.grid):
        raise ValueError("solver grid must refine the policy grid")
    scaled = config.variant == "discrete_scaled"

    def update(theta, fld):
        return discrete_step(theta, fld, config.tau, scaled=scaled, pinv=config.pinv_diagnostic)

    return _run(model, theta0, config, reference, solver_grid, reference_optimum, update)


# ---------------------------------------------------------------------------
# counters and post-processing
# ---------------------------------------------------------------------------


def iterations_to_tolerance(
    record: RunRecord | Sequence[float], epsilon: float, reference_optimum: float | None = None
) -> int | None:
    """First ``n`` with ``cost_n - reference < epsilon``; ``None`` if never reached."""
    if isinstance(record, RunRecord):
        costs = np.asarray(record.costs)
        if reference_optimum is None:
            reference_optimum = record.reference_optimum
    else:
        costs = np.asarray(record, dtype=float)
        if reference_optimum is None:
            raise ValueError("reference_optimum is required for a bare cost trace")
    hit = np.nonzero(costs - reference_optimum < epsilon)[0]
    return int(hit[0]) if hit.size else None


def tail_optimum(costs: Sequence[float], tail: int = 50) -> float:
    """Mesh-restricted optimum estimated as the mean of the last ``tail`` costs."""
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ValueError("empty cost trace")
    return float(costs[-tail:].mean())


def loglinear_fit(subopt: Sequence[float], floor: float = 1e-6) -> tuple[float, float, int]:
    """Least-squares fit of ``log(subopt)`` against the iteration index.

    Uses iterates up to the first one below ``floor`` (inclusive) and returns
    ``(slope, r_squared, points_used)``.
    """
    s = np.asarray(subopt, dtype=float)
    below = np.nonzero(s < floor)[0]
    end = int(below[0]) + 1 if below.size else s.size
    s = s[:end]
    s = s[s > 0]
    if s.size < 3:
        raise ValueError("need at least three positive suboptimality values")
    n = np.arange(s.size)
    y = np.log(s)
    slope, intercept = np.polyfit(n, y, 1)
    resid = y - (slope * n + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2, int(s.size)


# ---------------------------------------------------------------------------
# projection onto grids
# ---------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _average_callable(fn: Callable, grid: TimeGrid) -> np.ndarray:
    t = grid.left[:, None] + 0.5 * grid.steps[:, None] * (_GL_X[None, :] + 1.0)
    vals = np.array([[np.atleast_2d(np.asarray(fn(float(s)), dtype=float)) for s in row] for row in t])
    return 0.5 * np.einsum("q,nqij->nij", _GL_W, vals)


def _average_piecewise(values: np.ndarray, src: TimeGrid, target: TimeGrid) -> np.ndarray:
    cuts = np.union1d(src.nodes, target.nodes)
    cuts = cuts[np.concatenate([[True], np.diff(cuts) > 1e-12 * max(1.0, target.T)])]
    left, width = cuts[:-1], np.diff(cuts)
    out = np.zeros((target.n,) + values.shape[1:])
    np.add.at(out, target.interval_of(left), width[:, None, None] * values[src.interval_of(left)])
    return out / target.steps[:, None, None]


def project_policy_to_grid(
    theta: Policy | tuple[Callable, Callable], target: TimeGrid, v_mode: str = "average"
) -> Policy:
    """Project onto piecewise-constant policies on ``target``.

    ``K`` is always replaced by its interval averages (the L2 projection).
    ``V`` uses interval averages (``v_mode="average"``) or the value at the
    left node of each interval (``v_mode="left"``).  ``theta`` may be a
    policy or a pair of callables ``t -> K(t)``, ``t -> V(t)``.
    """
    if v_mode not in ("average", "left"):
        raise ValueError("v_mode must be 'average' or 'left'")
    if isinstance(theta, Policy):
        if theta.grid == target:
            return theta
        K = _average_piecewise(theta.K, theta.grid, target)
        if v_mode == "average":
            V = _average_piecewise(theta.V, theta.grid, target)
        else:
            V = theta.V[theta.grid.interval_of(target.left)]
        return Policy(target, K, V)
    fK, fV = theta
    K = _average_callable(fK, target)
    if v_mode == "average":
        V = _average_callable(fV, target)
    else:
        V = np.array([np.atleast_2d(np.asarray(fV(float(t)), dtype=float)) for t in target.left])
    return Policy(target, K, V)


# ---------------------------------------------------------------------------
# mesh sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    intervals: int
    n_scaled: int | None
    n_unscaled: int | None
    cstar_scaled: float
    cstar_unscaled: float


@dataclass(frozen=True)
class SweepTable:
    rows: tuple
    n_reference: int | None
    reference_optimum: float
    epsilon: float
    optimum: str = "tail"
    records: dict = field(default_factory=dict, repr=False, compare=False)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("intervals,n_scaled,n_unscaled,n_reference,cstar_scaled,cstar_unscaled\n")
            ref = "" if self.n_reference is None else str(self.n_reference)
            for r in self.rows:
                fh.write(
                    f"{r.intervals},{'' if r.n_scaled is None else r.n_scaled},"
                    f"{'' if r.n_unscaled is None else r.n_unscaled},{ref},"
                    f"{r.cstar_scaled!r},{r.cstar_unscaled!r}\n"
                )


def mesh_optimum(
    model: LqcModel,
    grid: TimeGrid,
    reference: RiccatiSolution,
    tau: float = 0.3,
    tol: float = 1e-14,
    max_iterations: int = 5000,
) -> float:
    """Optimal cost among policies piecewise constant on ``grid``.

    Runs the scaled iteration with a large step from the projection of the
    optimal policy until the cost stalls.  Any convergent step size gives the
    same limit; a large one just gets there quickly.
    """
    solver = reference.grid
    theta = project_policy_to_grid(optimal_policy(model, reference), grid)
    prev = np.inf
    for _ in range(max_iterations):
        sol = solve_trajectory(model, theta, solver)
        c = 0.5 * float(np.trace(sol.P[0] @ model.Sigma0)) + float(sol.phi[0])
        if abs(prev - c) < tol:
            return c
        prev = c
        theta = discrete_step(theta, gradient_field(model, theta, solution=sol), tau, scaled=True)
        if not theta.in_theta:
            raise NumericalError("mesh optimum search left the positive-definite cone; lower tau")
    log.warning("mesh optimum on %s did not stall within %d iterations", grid, max_iterations)
    return c


def mesh_sweep(
    model: LqcModel,
    theta0: Policy,
    mesh_family: Sequence[TimeGrid],
    scaled: PgConfig,
    unscaled: PgConfig,
    reference: RiccatiSolution,
    epsilon: float = 0.01,
    tail: int = 50,
    v_mode: str = "average",
    optimum: str = "tail",
) -> SweepTable:
    """Iteration counts ``N(eps)`` of both discrete variants on every mesh.

    All runs use ``reference.grid`` as the common solver grid.  The mesh
    optimum used in the counts is either

    ``"tail"``
        the mean of the last ``tail`` costs of a run of exactly
        ``max_iterations`` iterations (one per variant), or
    ``"converged"``
        :func:`mesh_optimum`, shared by both variants; runs then stop at the
        first iterate within ``epsilon`` (budget ``max_iterations``).

    The continuous reference count comes from a natural-gradient run on the
    solver grid measured against the Riccati optimum.
    """
    if optimum not in ("tail", "converged"):
        raise ValueError("optimum must be 'tail' or 'converged'")
    solver = reference.grid
    early = optimum == "converged"
    scaled = replace(scaled, variant="discrete_scaled", stop_early=early, stop_epsilon=epsilon, diagnostics_on=False)
    unscaled = replace(unscaled, variant="discrete_unscaled", stop_early=early, stop_epsilon=epsilon, diagnostics_on=False)
    cont_cfg = replace(scaled, variant="continuous", stop_early=True)
    cont = run_continuous_pg(model, project_policy_to_grid(theta0, solver, v_mode), cont_cfg, reference)
    rows, records = [], {"continuous": cont}
    for grid in mesh_family:
        th = project_policy_to_grid(theta0, grid, v_mode)
        if early:
            c_pi = mesh_optimum(model, grid, reference)
            rs = run_discrete_pg(model, th, scaled, reference, solver_grid=solver, reference_optimum=c_pi)
            ru = run_discrete_pg(model, th, unscaled, reference, solver_grid=solver, reference_optimum=c_pi)
            cs = cu = c_pi
        else:
            rs = run_discrete_pg(model, th, scaled, reference, solver_grid=solver)
            ru = run_discrete_pg(model, th, unscaled, reference, solver_grid=solver)
            cs, cu = tail_optimum(rs.costs, tail), tail_optimum(ru.costs, tail)
        rows.append(
            SweepRow(
                intervals=grid.n,
                n_scaled=iterations_to_tolerance(rs.costs, epsilon, cs),
                n_unscaled=iterations_to_tolerance(ru.costs, epsilon, cu),
                cstar_scaled=cs,
                cstar_unscaled=cu,
            )
        )
        records[grid.n] = (rs, ru)
    return SweepTable(
        rows=tuple(rows),
        n_reference=iterations_to_tolerance(cont, epsilon),
        reference_optimum=reference.optimal_cost,
        epsilon=epsilon,
        optimum=optimum,
        records=records,
    )
