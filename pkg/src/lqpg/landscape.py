"""Numerical checks of the cost landscape.

Every check integrates its right-hand side on the solver grid.  With the
``euler`` solvers the integrals use the same sampling as the discretized
cost (value matrix at the right end of a step, state moment at the left),
so identities hold to roundoff; ``rk4`` uses the trapezoid rule on nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gradient import _dk, _dv, directional_derivative
from .model import LqcModel, Policy, TimeGrid, spd_inv
from .ode import (
    DEFAULT_REFINE,
    RiccatiSolution,
    closed_loop,
    cost,
    optimal_policy,
    solve_trajectory,
    solve_riccati,
    solver_grid_for,
)

ABS_FLOOR = 1e-9


@dataclass(frozen=True)
class ResidualReport:
    """``residual`` is ``|lhs - rhs|`` for identities and ``rhs - lhs`` for upper bounds."""

    kind: str  # "identity" or "inequality"
    lhs: float
    rhs: float
    residual: float
    satisfied: bool
    tol: float
    descriptor: str = ""


def _tolerance(lhs: float, rtol: float) -> float:
    return max(rtol * (1.0 + abs(lhs)), ABS_FLOOR)


def _inequality(lhs: float, rhs: float, rtol: float, descriptor: str) -> ResidualReport:
    tol = _tolerance(lhs, rtol)
    res = rhs - lhs
    return ResidualReport("inequality", lhs, rhs, res, bool(res >= -tol), tol, descriptor)


def entropy_ell(model: LqcModel, times: np.ndarray, V: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``1/2 (<sum_j D_j^T Z D_j + R + rho Vbar^-1, V> - rho ln det V)`` at each time."""
    c = model.coefficients(times)
    W = np.einsum("npik,nij,npjl->nkl", c.D, Z, c.D) + c.R + model.rho * c.Vbar_inv
    sign, logdet = np.linalg.slogdet(V)
    if np.any(sign <= 0):
        raise ValueError("V must be positive definite")
    return 0.5 * (np.einsum("nij,nij->n", W, V) - model.rho * logdet)


def _quadrature(grid: TimeGrid, method: str, integrand) -> float:
    """Integrate ``integrand(times, node_index_for_P, node_index_for_Sigma)`` over the solver grid."""
    h = grid.steps
    n = grid.n
    if method == "euler":
        return float(np.sum(h * integrand(grid.left, np.arange(1, n + 1), np.arange(n))))
    left = integrand(grid.left, np.arange(n), np.arange(n))
    right = integrand(grid.nodes[1:], np.arange(1, n + 1), np.arange(1, n + 1))
    return float(np.sum(0.5 * h * (left + right)))


def _common_grid(theta: Policy, theta_p: Policy, grid: TimeGrid | None) -> TimeGrid:
    if grid is not None:
        return grid
    if theta.grid.is_refinement_of(theta_p.grid):
        return theta.grid.refine(DEFAULT_REFINE)
    if theta_p.grid.is_refinement_of(theta.grid):
        return theta_p.grid.refine(DEFAULT_REFINE)
    raise ValueError("policies need nested grids (or pass a common solver grid)")


def _gap_terms(model, theta, theta_p, grid, method):
    """Pieces shared by the gap identity and the smoothness bound."""
    sol = solve_trajectory(model, theta, grid, method)
    sol_p = solve_trajectory(model, theta_p, grid, method)
    K, V = theta.on(grid)
    Kp, Vp = theta_p.on(grid)
    c_theta = 0.5 * float(np.trace(sol.P[0] @ model.Sigma0)) + float(sol.phi[0])
    c_p = 0.5 * float(np.trace(sol_p.P[0] @ model.Sigma0)) + float(sol_p.phi[0])

    def k_terms(times, ip, isg):
        cl = closed_loop(model, times, K, V)
        P = sol.P[ip]
        Sp = sol_p.Sigma[isg]
        dK = Kp - K
        lin = np.einsum("nij,nij->n", dK, _dk(cl, P) @ Sp)
        gain = np.einsum("npik,nij,npjl->nkl", cl.coef.D, P, cl.coef.D) + cl.Rt
        quad = 0.5 * np.einsum("nij,nij->n", dK, gain @ dK @ Sp)
        return lin + quad

    return sol, sol_p, c_theta, c_p, k_terms, (K, V, Kp, Vp)


def performance_gap_residual(
    model: LqcModel,
    theta: Policy,
    theta_p: Policy,
    grid: TimeGrid | None = None,
    method: str = "euler",
    tol: float = 1e-5,
) -> ResidualReport:
    """Compare ``C(theta') - C(theta)`` with its expression through ``P^theta`` and ``Sigma^theta'``."""
    grid = _common_grid(theta, theta_p, grid)
    sol, _, c_theta, c_p, k_terms, (K, V, Kp, Vp) = _gap_terms(model, theta, theta_p, grid, method)

    def integrand(times, ip, isg):
        P = sol.P[ip]
        return k_terms(times, ip, isg) + entropy_ell(model, times, Vp, P) - entropy_ell(model, times, V, P)

    lhs = c_p - c_theta
    rhs = _quadrature(grid, method, integrand)
    res = abs(lhs - rhs)
    return ResidualReport("identity", lhs, rhs, res, bool(res <= tol), tol, "performance gap")


def smoothness_residual(
    model: LqcModel,
    theta: Policy,
    theta_p: Policy,
    grid: TimeGrid | None = None,
    method: str = "euler",
    rtol: float = 1e-6,
) -> ResidualReport:
    """Upper bound of ``C(theta') - C(theta)`` by first- and second-order terms in ``theta' - theta``."""
    grid = _common_grid(theta, theta_p, grid)
    sol, _, c_theta, c_p, k_terms, (K, V, Kp, Vp) = _gap_terms(model, theta, theta_p, grid, method)
    lam = np.minimum(np.linalg.eigvalsh(V)[:, 0], np.linalg.eigvalsh(Vp)[:, 0])

    def integrand(times, ip, isg):
        cl = closed_loop(model, times, K, V)
        dV = Vp - V
        lin = np.einsum("nij,nij->n", _dv(cl, sol.P[ip], model.rho), dV)
        curv = 0.25 * model.rho * np.sum(dV**2, axis=(1, 2)) / lam**2
        return k_terms(times, ip, isg) + lin + curv

    return _inequality(c_p - c_theta, _quadrature(grid, method, integrand), rtol, "almost smoothness")


def lojasiewicz_residual(
    model: LqcModel,
    theta: Policy,
    reference: RiccatiSolution,
    method: str = "euler",
    rtol: float = 1e-6,
) -> ResidualReport:
    """Suboptimality against the weighted squared gradient norm.

    Everything is computed on ``reference.grid``; the optimal policy is the
    one the Riccati integrator used on that grid.
    """
    grid = reference.grid
    theta_star = optimal_policy(model, reference)
    sol = solve_trajectory(model, theta, grid, method)
    sol_star = solve_trajectory(model, theta_star, grid, method)
    K, V = theta.on(grid)
    Vs = theta_star.V
    c_theta = 0.5 * float(np.trace(sol.P[0] @ model.Sigma0)) + float(sol.phi[0])
    c_star = 0.5 * float(np.trace(sol_star.P[0] @ model.Sigma0)) + float(sol_star.phi[0])
    weight = np.maximum(np.linalg.norm(Vs, 2, axis=(1, 2)), np.linalg.norm(V, 2, axis=(1, 2))) ** 2

    def integrand(times, ip, isg):
        cl = closed_loop(model, times, K, V)
        P = sol.P[ip]
        DK = _dk(cl, P)
        gain = np.einsum("npik,nij,npjl->nkl", cl.coef.D, P, cl.coef.D) + cl.Rt
        k_part = 0.5 * np.einsum("nij,nij->n", spd_inv(gain) @ DK, DK @ sol_star.Sigma[isg])
        v_part = weight / model.rho * np.sum(_dv(cl, P, model.rho) ** 2, axis=(1, 2))
        return k_part + v_part

    return _inequality(c_theta - c_star, _quadrature(grid, method, integrand), rtol, "Lojasiewicz")


# ---------------------------------------------------------------------------
# noncoercive example
# ---------------------------------------------------------------------------


def noncoercive_example_cost(epsilon: float, scaling: float = 1.0, grid: TimeGrid | None = None) -> float:
    """Cost ``int_0^1 (s K_t X_t)^2 dt`` of ``s K`` with ``K_t = -1/(1 + eps - t)`` and ``X' = s K X``, ``X_0 = 1``.

    Integrated with classical RK4 on ``grid`` (default 4096 uniform steps).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    grid = grid or TimeGrid.uniform(1.0, 4096)
    if abs(grid.T - 1.0) > 1e-12:
        raise ValueError("the example lives on [0, 1]")

    def rhs(t, y):
        a = -scaling / (1.0 + epsilon - t) * y[0]
        return np.array([a, a * a])

    y = np.array([1.0, 0.0])
    for t, h in zip(grid.left, grid.steps):
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(y[1])


def noncoercive_closed_form(epsilon: float, scaling: float = 1.0) -> float:
    """Exact value for ``scaling`` in ``{1, 0.5}``."""
    if scaling == 1.0:
        return 1.0 / (1.0 + epsilon) ** 2
    if scaling == 0.5:
        return 0.25 * np.log((1.0 + epsilon) / epsilon) / (1.0 + epsilon)
    raise ValueError("closed form only for scaling 1 or 0.5")


# ---------------------------------------------------------------------------
# finite-difference checker and random cases
# ---------------------------------------------------------------------------


def fd_gradient_check(
    model: LqcModel,
    theta: Policy,
    direction: tuple[np.ndarray, np.ndarray],
    h: float = 1e-4,
    grid: TimeGrid | None = None,
    method: str = "euler",
) -> float:
    """Relative error between a central difference of the cost and the directional derivative formula."""
    if not h > 0:
        raise ValueError("h must be positive")
    dK, dV = (np.asarray(x, dtype=float) for x in direction)
    dK = np.broadcast_to(dK, theta.K.shape)
    dV = np.broadcast_to(dV, theta.V.shape)
    if not np.any(dK) and not np.any(dV):
        return 0.0
    grid = solver_grid_for(theta, grid)
    plus = theta.with_values(theta.K + h * dK, theta.V + h * dV)
    minus = theta.with_values(theta.K - h * dK, theta.V - h * dV)
    if not (plus.in_theta and minus.in_theta):
        raise ValueError("perturbed covariance is not positive definite; shrink h")
    fd = (cost(model, plus, grid, method) - cost(model, minus, grid, method)) / (2 * h)
    an = directional_derivative(model, theta, dK, dV, grid, method)
    scale = max(abs(an), abs(fd))
    return 0.0 if scale == 0 else abs(fd - an) / scale


def random_policy(rng: np.random.Generator, grid: TimeGrid, k: int, d: int) -> Policy:
    """``K`` entries uniform in [-1, 1]; ``V = L^T L + 0.1 I`` with ``L`` entries uniform in [-1, 1]."""
    K = rng.uniform(-1.0, 1.0, (grid.n, k, d))
    L = rng.uniform(-1.0, 1.0, (grid.n, k, k))
    V = np.swapaxes(L, 1, 2) @ L + 0.1 * np.eye(k)
    return Policy(grid, K, V)


def random_model(rng: np.random.Generator, d: int, k: int, p: int = 1, T: float = 1.0) -> LqcModel:
    """Random well-posed problem with time-varying drift and PSD cost weights."""
    u = lambda *s: rng.uniform(-1.0, 1.0, s)  # noqa: E731
    A0, A1 = 0.5 * u(d, d), 0.5 * u(d, d)
    B0 = u(d, k)
    Lq, Lr, Lg = u(d, d), u(k, k), u(d, d)
    Ls = u(d, d)
    return LqcModel.build(
        A=lambda t: A0 + np.sin(2 * np.pi * t) * A1,
        B=lambda t: B0 * (1.0 + 0.3 * np.cos(2 * np.pi * t)),
        C=[0.3 * u(d, d) for _ in range(p)],
        D=[0.3 * u(d, k) for _ in range(p)],
        Q=0.5 * Lq @ Lq.T,
        S=0.2 * u(k, d),
        R=0.5 * Lr @ Lr.T + 0.1 * np.eye(k),
        G=0.5 * Lg @ Lg.T,
        rho=float(rng.uniform(0.05, 0.5)),
        Vbar=np.eye(k) * float(rng.uniform(0.5, 2.0)),
        T=T,
        Sigma0=Ls @ Ls.T + 0.1 * np.eye(d),
    )


@dataclass(frozen=True)
class LandscapeCase:
    case_id: int
    d: int
    k: int
    gap: ResidualReport
    smoothness: ResidualReport
    lojasiewicz: ResidualReport


def landscape_suite(
    n_scalar: int = 100,
    n_matrix: int = 20,
    seed: int = 0,
    policy_intervals: int = 8,
    refine: int = 16,
    method: str = "euler",
) -> list[LandscapeCase]:
    """Randomized scalar and ``d = k = 2`` cases for the three landscape checks.

    Case ``c`` draws from ``default_rng([seed, c])``; the first ``n_scalar``
    cases are scalar, the remaining ``n_matrix`` have ``d = k = 2``.
    """
    out = []
    for c in range(n_scalar + n_matrix):
        rng = np.random.default_rng([seed, c])
        d = k = 1 if c < n_scalar else 2
        model = random_model(rng, d, k)
        grid = TimeGrid.uniform(1.0, policy_intervals)
        solver = grid.refine(refine)
        theta = random_policy(rng, grid, k, d)
        theta_p = random_policy(rng, grid, k, d)
        ref = solve_riccati(model, solver, method)
        out.append(
            LandscapeCase(
                case_id=c,
                d=d,
                k=k,
                gap=performance_gap_residual(model, theta, theta_p, solver, method),
                smoothness=smoothness_residual(model, theta, theta_p, solver, method),
                lojasiewicz=lojasiewicz_residual(model, theta, ref, method),
            )
        )
    return out


def sweep_to_csv(rows: Sequence[tuple[int, int, ResidualReport]], path) -> None:
    """Rows of ``(case_id, seed, report)``."""
    with open(path, "w", newline="") as fh:
        fh.write("case_id,seed,lhs,rhs,residual,satisfied\n")
        for case_id, seed, r in rows:
            fh.write(f"{case_id},{seed},{r.lhs!r},{r.rhs!r},{r.residual!r},{int(r.satisfied)}\n")
