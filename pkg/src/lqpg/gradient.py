"""Closed-form derivatives of the cost with respect to ``K`` and ``V``.

All fields are returned per solver step.  ``sampling="adjoint"`` evaluates
the value matrix at the right end of each step; combined with the ``euler``
solvers this gives the exact derivative of the discretized cost.
``sampling="left"`` uses the left node instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LqcModel, Policy, TimeGrid, TrajectorySolution, spd_inv, sym
from .ode import closed_loop, solve_trajectory, solver_grid_for

SAMPLINGS = ("adjoint", "left")


def _value_samples(P: np.ndarray, sampling: str) -> np.ndarray:
    if sampling == "adjoint":
        return P[1:]
    if sampling == "left":
        return P[:-1]
    raise ValueError(f"unknown sampling {sampling!r}; expected one of {SAMPLINGS}")


def _dk(cl, P: np.ndarray) -> np.ndarray:
    c = cl.coef
    Dt = np.swapaxes(c.D, 2, 3)
    chan = np.einsum("npkd,nde,npef->nkf", Dt, P, cl.N)
    return np.swapaxes(c.B, 1, 2) @ P + chan + c.S + cl.Rt @ cl.K


def _dv(cl, P: np.ndarray, rho: float) -> np.ndarray:
    c = cl.coef
    DPD = np.einsum("npik,nij,npjl->nkl", c.D, P, c.D)
    return 0.5 * sym(DPD + c.R + rho * (c.Vbar_inv - spd_inv(cl.V)))


def gradient_K(
    model: LqcModel, theta: Policy, P: np.ndarray, grid: TimeGrid | None = None, sampling: str = "adjoint"
) -> np.ndarray:
    """``D_K = B^T P + sum_j D_j^T P (C_j + D_j K) + S + (R + rho Vbar^-1) K`` per solver step."""
    grid = solver_grid_for(theta, grid)
    K, V = theta.on(grid)
    return _dk(closed_loop(model, grid.left, K, V), _value_samples(P, sampling))


def gradient_V(
    model: LqcModel, theta: Policy, P: np.ndarray, grid: TimeGrid | None = None, sampling: str = "adjoint"
) -> np.ndarray:
    """``D_V = 1/2 (sum_j D_j^T P D_j + R + rho (Vbar^-1 - V^-1))`` per solver step."""
    grid = solver_grid_for(theta, grid)
    K, V = theta.on(grid)
    return _dv(closed_loop(model, grid.left, K, V), _value_samples(P, sampling), model.rho)


def bw_gradient_V(DV: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Bures-Wasserstein direction ``D_V V + V D_V``."""
    DV = np.asarray(DV, dtype=float)
    V = np.asarray(V, dtype=float)
    return sym(DV @ V + V @ DV)


@dataclass(frozen=True)
class GradientField:
    """Derivative fields on the steps of a solver grid.

    ``Sigma`` holds the state second moment at the left node of every step,
    so ``vanilla_K = DK @ Sigma``.
    """

    grid: TimeGrid
    DK: np.ndarray
    DV: np.ndarray
    DV_bw: np.ndarray
    vanilla_K: np.ndarray
    Sigma: np.ndarray

    def l2_norms(self) -> tuple[float, float]:
        h = self.grid.steps
        gk = float(np.sqrt(np.sum(h * np.sum(self.DK**2, axis=(1, 2)))))
        gv = float(np.sqrt(np.sum(h * np.sum(self.DV**2, axis=(1, 2)))))
        return gk, gv

    def interval_integrals(self, coarse: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
        """``int D_K Sigma dt`` and ``int D_V dt`` over each interval of ``coarse``."""
        idx = coarse.interval_of(self.grid.left)
        h = self.grid.steps[:, None, None]
        gK = np.zeros((coarse.n,) + self.DK.shape[1:])
        gV = np.zeros((coarse.n,) + self.DV.shape[1:])
        np.add.at(gK, idx, h * self.vanilla_K)
        np.add.at(gV, idx, h * self.DV)
        return gK, sym(gV)


def gradient_field(
    model: LqcModel,
    theta: Policy,
    solution: TrajectorySolution | None = None,
    grid: TimeGrid | None = None,
    method: str = "euler",
    sampling: str = "adjoint",
) -> GradientField:
    sol = solution if solution is not None else solve_trajectory(model, theta, grid, method)
    grid = sol.grid
    K, V = theta.on(grid)
    cl = closed_loop(model, grid.left, K, V)
    P = _value_samples(sol.P, sampling)
    DK = _dk(cl, P)
    DV = _dv(cl, P, model.rho)
    Sigma = sol.Sigma[:-1]
    return GradientField(grid=grid, DK=DK, DV=DV, DV_bw=bw_gradient_V(DV, V), vanilla_K=DK @ Sigma, Sigma=Sigma)


def directional_derivative(
    model: LqcModel,
    theta: Policy,
    dK: np.ndarray,
    dV: np.ndarray,
    grid: TimeGrid | None = None,
    method: str = "euler",
    solution: TrajectorySolution | None = None,
) -> float:
    """``int <D_K Sigma, dK> + <D_V, dV> dt`` for piecewise-constant directions on ``theta.grid``.

    ``euler`` uses the adjoint sampling; ``rk4`` uses the trapezoid rule on
    node values (coefficients at the nodes, policy frozen on each step).
    """
    sol = solution if solution is not None else solve_trajectory(model, theta, grid, method)
    grid = sol.grid
    idx = theta.grid.interval_of(grid.left)
    dK = np.asarray(dK, dtype=float)
    dV = np.asarray(dV, dtype=float)
    if dK.ndim == 2:
        dK = np.broadcast_to(dK, (theta.grid.n,) + dK.shape)
    if dV.ndim == 2:
        dV = np.broadcast_to(dV, (theta.grid.n,) + dV.shape)
    dK, dV = dK[idx], dV[idx]
    K, V = theta.on(grid)
    h = grid.steps

    def integrand(cl, P, Sigma):
        return np.einsum("nij,nij->n", _dk(cl, P) @ Sigma, dK) + np.einsum("nij,nij->n", _dv(cl, P, model.rho), dV)

    if method == "euler":
        cl = closed_loop(model, grid.left, K, V)
        return float(np.sum(h * integrand(cl, sol.P[1:], sol.Sigma[:-1])))
    left = integrand(closed_loop(model, grid.left, K, V), sol.P[:-1], sol.Sigma[:-1])
    right = integrand(closed_loop(model, grid.nodes[1:], K, V), sol.P[1:], sol.Sigma[1:])
    return float(np.sum(0.5 * h * (left + right)))
