"""Riccati and Lyapunov solvers and exact cost evaluation.

Two integrators are provided.

``euler``
    Explicit Euler with coefficients and policy frozen at the left end of
    each step.  The backward step for ``P`` and the forward step for
    ``Sigma`` are exact adjoints of each other, so the cost computed from
    ``(P_0, phi_0)`` equals the left-Riemann sum of the running cost along
    ``Sigma`` and the gradient formulas are the exact derivatives of the
    discretized cost.
``rk4``
    Classical Runge-Kutta with coefficients sampled at stage times; used as
    a high-order cross-check.

Linear matrix ODEs are handled in row-major ``vec`` form with an extra
affine coordinate, so every step is one small matrix and a whole solve is a
scan of matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    Coefficients,
    LqcModel,
    NumericalError,
    Policy,
    SingularityError,
    TimeGrid,
    TrajectorySolution,
    spd_inv,
    sym,
)

DEFAULT_REFINE = 8
METHODS = ("euler", "rk4")
PSD_FLOOR = 1e-10


def solver_grid_for(theta: Policy, grid: TimeGrid | None = None, refine: int = DEFAULT_REFINE) -> TimeGrid:
    """Solver grid: ``grid`` if given, otherwise the policy grid refined ``refine`` times."""
    if grid is not None:
        return grid
    return theta.grid.refine(refine)


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# per-step closed-loop data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClosedLoop:
    """Closed-loop coefficients of a policy on a vector of times.

    ``K``/``V`` are the policy values active at those times.  ``M = A + BK``,
    ``N_j = C_j + D_j K``, ``Qt`` is the state-cost weight
    ``Q + K^T S + S^T K + K^T (R + rho Vbar^-1) K`` and ``noise`` the additive
    covariance source ``sum_j D_j V D_j^T``.
    """

    coef: Coefficients
    K: np.ndarray
    V: np.ndarray
    M: np.ndarray
    N: np.ndarray
    Qt: np.ndarray
    noise: np.ndarray
    Rt: np.ndarray  # R + rho Vbar^-1


_CL_CACHE: dict = {}


def closed_loop(model: LqcModel, times: np.ndarray, K: np.ndarray, V: np.ndarray) -> ClosedLoop:
    # one PG iteration asks for the same closed loop several times
    key = (id(model), times.tobytes(), K.tobytes(), V.tobytes())
    hit = _CL_CACHE.get(key)
    if hit is not None and hit[0] is model:
        return hit[1]
    cl = _closed_loop(model, times, K, V)
    if len(_CL_CACHE) >= 8:
        _CL_CACHE.pop(next(iter(_CL_CACHE)))
    _CL_CACHE[key] = (model, cl)
    return cl


def _closed_loop(model: LqcModel, times: np.ndarray, K: np.ndarray, V: np.ndarray) -> ClosedLoop:
    c = model.coefficients(times)
    Rt = c.R + model.rho * c.Vbar_inv
    M = c.A + c.B @ K
    N = c.C + c.D @ K[:, None]
    KS = np.swapaxes(K, 1, 2) @ c.S
    Qt = sym(c.Q + KS + np.swapaxes(KS, 1, 2) + np.swapaxes(K, 1, 2) @ Rt @ K)
    noise = sym(np.einsum("npik,nkl,npjl->nij", c.D, V, c.D))
    return ClosedLoop(coef=c, K=K, V=V, M=M, N=N, Qt=Qt, noise=noise, Rt=Rt)


def _lyapunov_operator(cl: ClosedLoop) -> np.ndarray:
    """Row-major vec form of ``P -> M^T P + P M + sum_j N_j^T P N_j``."""
    n, d, _ = cl.M.shape
    eye = np.eye(d)
    Mt = np.swapaxes(cl.M, 1, 2)
    L = np.einsum("nij,kl->nikjl", Mt, eye) + np.einsum("ij,nkl->nikjl", eye, Mt)
    Nt = np.swapaxes(cl.N, 2, 3)
    L = L + np.einsum("npij,npkl->nikjl", Nt, Nt)
    return L.reshape(n, d * d, d * d)


def _affine(L: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Embed ``x -> L x + q`` as an (m+1) x (m+1) matrix acting on ``(x, 1)``."""
    n, m, _ = L.shape
    out = np.zeros((n, m + 1, m + 1))
    out[:, :m, :m] = L
    out[:, :m, m] = q
    return out


def _rk4_propagator(L1: np.ndarray, L2: np.ndarray, L4: np.ndarray, h: np.ndarray) -> np.ndarray:
    """One classical RK4 step for the linear ODE ``x' = L(s) x`` as a matrix."""
    hh = h[:, None, None]
    eye = np.eye(L1.shape[-1])[None]
    k1 = L1
    k2 = L2 @ (eye + 0.5 * hh * k1)
    k3 = L2 @ (eye + 0.5 * hh * k2)
    k4 = L4 @ (eye + hh * k3)
    return eye + hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _stage_closed_loops(model: LqcModel, grid: TimeGrid, K: np.ndarray, V: np.ndarray):
    """Closed loops at left nodes, midpoints and right nodes of every step."""
    mids = grid.left + 0.5 * grid.steps
    return (
        closed_loop(model, grid.left, K, V),
        closed_loop(model, mids, K, V),
        closed_loop(model, grid.nodes[1:], K, V),
    )


def _flat(X: np.ndarray) -> np.ndarray:
    return X.reshape(X.shape[0], -1)


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------


def _backward_propagators(model: LqcModel, grid: TimeGrid, K, V, method: str) -> np.ndarray:
    h = grid.steps
    if method == "euler":
        cl = closed_loop(model, grid.left, K, V)
        Lh = _affine(_lyapunov_operator(cl), _flat(cl.Qt))
        return np.eye(Lh.shape[-1])[None] + h[:, None, None] * Lh
    left, mid, right = _stage_closed_loops(model, grid, K, V)
    # integrating in reversed time: first stage at the right node
    ops = [_affine(_lyapunov_operator(c), _flat(c.Qt)) for c in (right, mid, left)]
    return _rk4_propagator(*ops, h)


def _forward_propagators(model: LqcModel, grid: TimeGrid, K, V, method: str) -> np.ndarray:
    h = grid.steps
    if method == "euler":
        cl = closed_loop(model, grid.left, K, V)
        Lh = _affine(np.swapaxes(_lyapunov_operator(cl), 1, 2), _flat(cl.noise))
        return np.eye(Lh.shape[-1])[None] + h[:, None, None] * Lh
    left, mid, right = _stage_closed_loops(model, grid, K, V)
    ops = [_affine(np.swapaxes(_lyapunov_operator(c), 1, 2), _flat(c.noise)) for c in (left, mid, right)]
    return _rk4_propagator(*ops, h)


def _run_backward(Phi: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    """``x_i = Phi_i x_{i+1}`` from ``x_n = (terminal, 1)``, via a doubling scan of suffix products."""
    n = Phi.shape[0]
    prods = Phi.copy()
    shift = 1
    while shift < n:
        prods[: n - shift] = prods[: n - shift] @ prods[shift:]
        shift *= 2
    x = np.append(terminal.ravel(), 1.0)
    out = np.empty((n + 1, x.size))
    out[:n] = prods @ x
    out[n] = x
    return out[:, :-1]


def _run_forward(Psi: np.ndarray, initial: np.ndarray) -> np.ndarray:
    """``x_{i+1} = Psi_i x_i`` from ``x_0 = (initial, 1)``, via a doubling scan of prefix products."""
    n = Psi.shape[0]
    prods = Psi.copy()
    shift = 1
    while shift < n:
        prods[shift:] = prods[shift:] @ prods[: n - shift]
        shift *= 2
    x = np.append(initial.ravel(), 1.0)
    out = np.empty((n + 1, x.size))
    out[0] = x
    out[1:] = prods @ x
    return out[:, :-1]


def solve_policy_lyapunov(
    model: LqcModel, theta: Policy, grid: TimeGrid | None = None, method: str = "euler"
) -> np.ndarray:
    """Value matrix ``P^theta`` at the nodes of the solver grid (backward from ``G``)."""
    _check_method(method)
    grid = solver_grid_for(theta, grid)
    K, V = theta.on(grid)
    P = _run_backward(_backward_propagators(model, grid, K, V, method), model.G)
    P = sym(P.reshape(-1, model.d, model.d))
    if not np.all(np.isfinite(P)):
        raise NumericalError("value matrix blew up (non-finite entries); refine the solver grid")
    return P


def solve_state_covariance(
    model: LqcModel, theta: Policy, grid: TimeGrid | None = None, method: str = "euler", tol: float = 1e-10
) -> np.ndarray:
    """State second moment ``Sigma^theta`` at the solver nodes (forward from ``Sigma0``)."""
    _check_method(method)
    grid = solver_grid_for(theta, grid)
    K, V = theta.on(grid)
    S = _run_forward(_forward_propagators(model, grid, K, V, method), model.Sigma0)
    S = sym(S.reshape(-1, model.d, model.d))
    if not np.all(np.isfinite(S)):
        raise NumericalError("state covariance blew up (non-finite entries); refine the solver grid")
    w = np.linalg.eigvalsh(S).min(axis=1)
    scale = max(1.0, float(np.abs(S).max()))
    bad = np.nonzero(w < -tol * scale)[0]
    if bad.size:
        i = int(bad[0])
        raise NumericalError(f"covariance lost PSD at t={grid.nodes[i]:.6g} (min eigenvalue {w[i]:.3e})")
    return S


def _phi_rate(cl: ClosedLoop, P: np.ndarray, rho: float, k: int) -> np.ndarray:
    """Integrand ``1/2 tr((D^T P D + R + rho Vbar^-1) V) + rho/2 (-k + ln det Vbar / det V)``."""
    DPD = np.einsum("npik,nij,npjl->nkl", cl.coef.D, P, cl.coef.D)
    sign, logdet_v = np.linalg.slogdet(cl.V)
    if np.any(sign <= 0):
        raise NumericalError("policy covariance has non-positive determinant")
    tr = np.einsum("nij,nji->n", DPD + cl.Rt, cl.V)
    return 0.5 * tr + 0.5 * rho * (-k + cl.coef.logdet_Vbar - logdet_v)


def _lyapunov_rhs(cl: ClosedLoop, P: np.ndarray) -> np.ndarray:
    """``-dP/dt`` for the policy Lyapunov equation."""
    Mt = np.swapaxes(cl.M, 1, 2)
    Nt = np.swapaxes(cl.N, 2, 3)
    return Mt @ P + P @ cl.M + np.einsum("npij,njk,npkl->nil", Nt, P, cl.N) + cl.Qt


def solve_phi(
    model: LqcModel, theta: Policy, P: np.ndarray, grid: TimeGrid | None = None, method: str = "euler"
) -> np.ndarray:
    """Scalar part ``phi^theta`` of the value function at the solver nodes."""
    _check_method(method)
    grid = solver_grid_for(theta, grid)
    K, V = theta.on(grid)
    h = grid.steps
    if method == "euler":
        cl = closed_loop(model, grid.left, K, V)
        rate = h * _phi_rate(cl, P[1:], model.rho, model.k)
    else:
        left, mid, right = _stage_closed_loops(model, grid, K, V)
        dP_left = -_lyapunov_rhs(left, P[:-1])
        dP_right = -_lyapunov_rhs(right, P[1:])
        P_mid = 0.5 * (P[:-1] + P[1:]) + (h / 8.0)[:, None, None] * (dP_left - dP_right)
        g = (
            _phi_rate(left, P[:-1], model.rho, model.k)
            + 4.0 * _phi_rate(mid, P_mid, model.rho, model.k)
            + _phi_rate(right, P[1:], model.rho, model.k)
        )
        rate = h / 6.0 * g
    return np.append(np.cumsum(rate[::-1])[::-1], 0.0)


def solve_trajectory(
    model: LqcModel, theta: Policy, grid: TimeGrid | None = None, method: str = "euler"
) -> TrajectorySolution:
    grid = solver_grid_for(theta, grid)
    P = solve_policy_lyapunov(model, theta, grid, method)
    Sigma = solve_state_covariance(model, theta, grid, method)
    phi = solve_phi(model, theta, P, grid, method)
    return TrajectorySolution(grid=grid, P=P, Sigma=Sigma, phi=phi)


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostBreakdown:
    """Cost of a policy.

    ``total`` comes from the value-function representation; the three
    components integrate the running cost along ``Sigma`` (trapezoid on the
    solver nodes) and their sum is ``integral_total``.
    """

    total: float
    quadratic_terminal: float
    running_quadratic: float
    entropy_term: float
    representation_gap: float
    solution: TrajectorySolution = field(repr=False)

    @property
    def integral_total(self) -> float:
        return self.quadratic_terminal + self.running_quadratic + self.entropy_term


def _running_cost(cl: ClosedLoop, Sigma: np.ndarray, rho: float, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic and entropy parts of the running cost at the given times."""
    c = cl.coef
    Kt = np.swapaxes(cl.K, 1, 2)
    KS = Kt @ c.S
    Wq = c.Q + KS + np.swapaxes(KS, 1, 2) + Kt @ c.R @ cl.K
    quad = 0.5 * np.einsum("nij,nji->n", Wq, Sigma) + 0.5 * np.einsum("nij,nji->n", c.R, cl.V)
    _, logdet_v = np.linalg.slogdet(cl.V)
    kl = (
        np.einsum("nij,nji->n", Kt @ c.Vbar_inv @ cl.K, Sigma)
        + np.einsum("nij,nji->n", c.Vbar_inv, cl.V)
        - k
        + c.logdet_Vbar
        - logdet_v
    )
    return quad, 0.5 * rho * kl


def evaluate_cost(
    model: LqcModel,
    theta: Policy,
    grid: TimeGrid | None = None,
    method: str = "euler",
    solution: TrajectorySolution | None = None,
) -> CostBreakdown:
    """Cost ``1/2 tr(P_0 Sigma_0) + phi_0`` with the integral representation as a cross-check."""
    sol = solution if solution is not None else solve_trajectory(model, theta, grid, method)
    grid = sol.grid
    K, V = theta.on(grid)
    h = grid.steps
    total = 0.5 * float(np.trace(sol.P[0] @ model.Sigma0)) + float(sol.phi[0])
    if method == "euler":
        cl = closed_loop(model, grid.left, K, V)
        cl_right = cl
    else:
        cl = closed_loop(model, grid.left, K, V)
        cl_right = closed_loop(model, grid.nodes[1:], K, V)
    qa, ea = _running_cost(cl, sol.Sigma[:-1], model.rho, model.k)
    qb, eb = _running_cost(cl_right, sol.Sigma[1:], model.rho, model.k)
    running = float(np.sum(0.5 * h * (qa + qb)))
    entropy = float(np.sum(0.5 * h * (ea + eb)))
    terminal = 0.5 * float(np.trace(model.G @ sol.Sigma[-1]))
    integral = terminal + running + entropy
    if not np.isfinite(total):
        raise NumericalError("cost is not finite")
    return CostBreakdown(
        total=total,
        quadratic_terminal=terminal,
        running_quadratic=running,
        entropy_term=entropy,
        representation_gap=abs(total - integral),
        solution=sol,
    )


def cost(model: LqcModel, theta: Policy, grid: TimeGrid | None = None, method: str = "euler") -> float:
    """Cost via the value-function representation only (cheapest path)."""
    grid = solver_grid_for(theta, grid)
    P = solve_policy_lyapunov(model, theta, grid, method)
    phi = solve_phi(model, theta, P, grid, method)
    return 0.5 * float(np.trace(P[0] @ model.Sigma0)) + float(phi[0])


# ---------------------------------------------------------------------------
# Riccati equation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiccatiSolution:
    """Optimal value matrix on a grid.

    ``K_step``/``V_step`` are the optimal policy values the integrator used
    on every step; for ``euler`` they make ``(K_step, V_step)`` the exact
    minimizer of the discretized problem.
    """

    grid: TimeGrid
    P_star: np.ndarray
    phi_star: np.ndarray
    K_step: np.ndarray
    V_step: np.ndarray
    gain_eigs: np.ndarray  # min/max eigenvalue of D^T P* D + R + rho Vbar^-1 per node, shape (n+1, 2)
    Sigma0: np.ndarray
    method: str

    @property
    def delta_tilde(self) -> float:
        return float(self.gain_eigs[:, 0].min())

    @property
    def strongly_regular(self) -> bool:
        return self.delta_tilde > 0

    @property
    def lambda_max(self) -> float:
        return float(self.gain_eigs[:, 1].max())

    @property
    def optimal_cost(self) -> float:
        return 0.5 * float(np.trace(self.P_star[0] @ self.Sigma0)) + float(self.phi_star[0])


def _riccati_parts(c: Coefficients, i: int, P: np.ndarray, rho: float):
    """Gain matrix and linear term of the Riccati right-hand side at sample ``i``."""
    A, B, C, D = c.A[i], c.B[i], c.C[i], c.D[i]
    DP = np.swapaxes(D, 1, 2) @ P
    gain = sym(np.einsum("pkd,pdl->kl", DP, D) + c.R[i] + rho * c.Vbar_inv[i])
    b = B.T @ P + np.einsum("pkd,pdl->kl", DP, C) + c.S[i]
    base = A.T @ P + P @ A + np.einsum("pji,jk,pkl->il", C, P, C) + c.Q[i]
    return gain, b, base


def _riccati_rhs(c: Coefficients, i: int, P: np.ndarray, rho: float, t: float):
    gain, b, base = _riccati_parts(c, i, P, rho)
    w, U = np.linalg.eigh(gain)
    if w[0] <= PSD_FLOOR:
        raise SingularityError(i, float(w[0]), t=t)
    gain_inv = (U / w) @ U.T
    K = -gain_inv @ b
    return sym(base - b.T @ gain_inv @ b), K, rho * sym(gain_inv), w


def solve_riccati(model: LqcModel, grid: TimeGrid, method: str = "euler") -> RiccatiSolution:
    """Integrate the Riccati equation backward from ``P_T = G``."""
    _check_method(method)
    n, d, k, rho = grid.n, model.d, model.k, model.rho
    h = grid.steps
    left = model.coefficients(grid.left)
    nodes = model.coefficients(grid.nodes)
    P = np.empty((n + 1, d, d))
    P[n] = model.G
    K_step = np.empty((n, k, d))
    V_step = np.empty((n, k, k))
    eigs = np.empty((n + 1, 2))
    rate = np.empty(n)
    logdet_vbar = left.logdet_Vbar
    if method == "rk4":
        mid = model.coefficients(grid.left + 0.5 * h)
    for i in range(n - 1, -1, -1):
        Pi = P[i + 1]
        if method == "euler":
            F, K_step[i], V_step[i], _ = _riccati_rhs(left, i, Pi, rho, grid.left[i])
            P[i] = sym(Pi + h[i] * F)
            rate[i] = 0.5 * rho * (logdet_vbar[i] - np.linalg.slogdet(V_step[i])[1])
        else:
            t1, tm, t0 = grid.nodes[i + 1], grid.left[i] + 0.5 * h[i], grid.nodes[i]
            k1, _, V1, _ = _riccati_rhs(nodes, i + 1, Pi, rho, t1)
            P2 = Pi + 0.5 * h[i] * k1
            k2, _, _, _ = _riccati_rhs(mid, i, P2, rho, tm)
            k3, _, _, _ = _riccati_rhs(mid, i, Pi + 0.5 * h[i] * k2, rho, tm)
            k4, _, _, _ = _riccati_rhs(nodes, i, Pi + h[i] * k3, rho, t0)
            P[i] = sym(Pi + h[i] / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
            F0, K_step[i], V_step[i], _ = _riccati_rhs(nodes, i, P[i], rho, t0)
            # Hermite midpoint of P (dP/dt = -F)
            P_mid = 0.5 * (P[i] + Pi) + h[i] / 8.0 * (k1 - F0)
            _, _, V_mid, _ = _riccati_rhs(mid, i, P_mid, rho, tm)
            # along the optimum the phi integrand is rho/2 ln(det Vbar / det V*)
            g = [
                nodes.logdet_Vbar[i + 1] - np.linalg.slogdet(V1)[1],
                mid.logdet_Vbar[i] - np.linalg.slogdet(V_mid)[1],
                nodes.logdet_Vbar[i] - np.linalg.slogdet(V_step[i])[1],
            ]
            rate[i] = 0.5 * rho * (g[0] + 4 * g[1] + g[2]) / 6.0
        if not np.all(np.isfinite(P[i])):
            raise NumericalError(f"Riccati solution blew up at t={grid.nodes[i]:.6g}")
    # gain eigenvalues at every node
    for i in range(n + 1):
        gain, _, _ = _riccati_parts(nodes, i, P[i], rho)
        w = np.linalg.eigvalsh(gain)
        eigs[i] = (w[0], w[-1])
        if w[0] <= PSD_FLOOR:
            raise SingularityError(i, float(w[0]), t=float(grid.nodes[i]))
    phi = np.append(np.cumsum((h * rate)[::-1])[::-1], 0.0)
    return RiccatiSolution(
        grid=grid, P_star=P, phi_star=phi, K_step=K_step, V_step=V_step, gain_eigs=eigs,
        Sigma0=model.Sigma0, method=method,
    )


def optimal_policy(model: LqcModel, riccati: RiccatiSolution, grid: TimeGrid | None = None) -> Policy:
    """Optimal feedback policy, piecewise constant on ``grid`` (default: the Riccati grid).

    On a coarser grid each interval takes the value active at its left node.
    """
    if not riccati.strongly_regular:
        raise SingularityError(0, riccati.delta_tilde)
    if grid is None or grid == riccati.grid:
        return Policy(riccati.grid, riccati.K_step, riccati.V_step)
    idx = riccati.grid.interval_of(grid.left)
    return Policy(grid, riccati.K_step[idx], riccati.V_step[idx])


def gain_matrix(model: LqcModel, times: np.ndarray, P: np.ndarray) -> np.ndarray:
    """``sum_j D_j^T P D_j + R + rho Vbar^-1`` at the given times."""
    c = model.coefficients(times)
    return sym(np.einsum("npik,nij,npjl->nkl", c.D, P, c.D) + c.R + model.rho * c.Vbar_inv)


def trajectory_to_csv(solution: TrajectorySolution, path) -> None:
    solution.to_csv(path)


__all__ = [
    "ClosedLoop",
    "CostBreakdown",
    "RiccatiSolution",
    "closed_loop",
    "cost",
    "evaluate_cost",
    "gain_matrix",
    "optimal_policy",
    "solve_phi",
    "solve_policy_lyapunov",
    "solve_riccati",
    "solve_state_covariance",
    "solve_trajectory",
    "spd_inv",
    "trajectory_to_csv",
]
