import math

import numpy as np
import pytest

from conftest import scalar_model, zero_model
from lqpg.model import NumericalError, Policy, SingularityError, TimeGrid
from lqpg.ode import (
    cost,
    evaluate_cost,
    optimal_policy,
    solve_phi,
    solve_policy_lyapunov,
    solve_riccati,
    solve_state_covariance,
    solve_trajectory,
)
from lqpg.landscape import random_policy
from lqpg.presets import MV_DTD


# independent closed forms for a scalar problem with constant coefficients and constant (k, v)
def scalar_closed_form(a, b, c, dd, q, s, r, g, rho, vbar, sigma0, k, v, t, T=1.0):
    alpha = 2 * (a + b * k) + (c + dd * k) ** 2
    beta = q + 2 * s * k + k * k * (r + rho / vbar)
    P = (g + beta / alpha) * np.exp(alpha * (T - t)) - beta / alpha
    Sig = (sigma0 + dd * dd * v / alpha) * np.exp(alpha * t) - dd * dd * v / alpha
    intP = (g + beta / alpha) * (np.exp(alpha * (T - t)) - 1) / alpha - beta * (T - t) / alpha
    phi = 0.5 * (dd * dd * intP + (r + rho / vbar) * (T - t)) * v + 0.5 * rho * (-1 + math.log(vbar / v)) * (T - t)
    return P, Sig, phi


PARAMS = dict(a=0.3, b=0.7, c=0.2, dd=0.5, q=0.4, s=0.1, r=0.3, g=1.2, rho=0.2, vbar=0.8, sigma0=0.5)


def scalar_case(n=1024):
    m = scalar_model(**PARAMS)
    g = TimeGrid.uniform(1.0, n)
    th = Policy(g, [[-0.6]], [[0.4]])
    return m, g, th


def test_lyapunov_closed_form_rk4():
    m, g, th = scalar_case()
    sol = solve_trajectory(m, th, g, "rk4")
    P, S, phi = scalar_closed_form(**PARAMS, k=-0.6, v=0.4, t=g.nodes)
    assert np.max(np.abs(sol.P[:, 0, 0] - P)) < 1e-6
    assert np.max(np.abs(sol.Sigma[:, 0, 0] - S)) < 1e-6
    assert np.max(np.abs(sol.phi - phi)) < 1e-8


def test_euler_first_order_and_rk4_fourth_order():
    m = scalar_model(**PARAMS)
    P_exact, S_exact, _ = scalar_closed_form(**PARAMS, k=-0.6, v=0.4, t=np.array([0.0, 1.0]))
    errs = {}
    for method in ("euler", "rk4"):
        e = []
        for n in (32, 64, 128):
            g = TimeGrid.uniform(1.0, n)
            th = Policy(g, [[-0.6]], [[0.4]])
            e.append(abs(solve_policy_lyapunov(m, th, g, method)[0, 0, 0] - P_exact[0]))
        errs[method] = e
    r = errs["euler"]
    assert 1.8 < r[0] / r[1] < 2.2 and 1.8 < r[1] / r[2] < 2.2
    r = errs["rk4"]
    assert 14 < r[0] / r[1] < 18


def test_solution_invariants(mv_model, mv_theta0):
    sol = solve_trajectory(mv_model, mv_theta0)
    assert np.allclose(sol.P[-1], mv_model.G)
    assert np.allclose(sol.Sigma[0], mv_model.Sigma0)
    assert sol.phi[-1] == 0.0
    assert np.linalg.eigvalsh(sol.Sigma).min() > 0
    assert np.allclose(sol.P, np.swapaxes(sol.P, 1, 2))


def test_zero_model_is_frozen():
    G = np.array([[2.0, 0.5], [0.5, 1.0]])
    S0 = np.array([[1.0, 0.2], [0.2, 0.5]])
    m = zero_model(d=2, k=2, g=G, sigma0=S0)
    g = TimeGrid.uniform(1.0, 8)
    th = Policy(g, np.zeros((2, 2)), np.eye(2))  # V = Vbar
    sol = solve_trajectory(m, th)
    assert np.allclose(sol.P, G) and np.allclose(sol.Sigma, S0)
    assert np.allclose(sol.phi, 0.0, atol=1e-15)
    cb = evaluate_cost(m, th)
    assert cb.total == pytest.approx(0.5 * np.trace(G @ S0), abs=1e-14)
    assert cb.entropy_term == pytest.approx(0.0, abs=1e-14)


def test_zero_rhs_riccati_is_constant():
    G = np.array([[3.0]])
    m = zero_model(g=G)
    ref = solve_riccati(m, TimeGrid.uniform(1.0, 16))
    assert np.allclose(ref.P_star, G)


def test_optimal_policy_collapses_without_control():
    m = scalar_model(b=0.0, dd=0.0, s=0.0, r=0.3, rho=0.2, vbar=0.8, q=1.0, a=0.1)
    th = optimal_policy(m, solve_riccati(m, TimeGrid.uniform(1.0, 16)))
    assert np.allclose(th.K, 0.0)
    assert np.allclose(th.V, 0.2 / (0.3 + 0.2 / 0.8))
    m0 = scalar_model(b=0.0, dd=0.0, s=0.0, r=0.0, rho=0.2, vbar=0.8)
    th0 = optimal_policy(m0, solve_riccati(m0, TimeGrid.uniform(1.0, 16)))
    assert np.allclose(th0.V, 0.8)


def test_benchmark_optimal_cost_matches_hand_recursion(mv_riccati):
    """Independent scalar implementation of the explicit Euler Riccati and phi recursions."""
    rho, vb, n = 0.01, 0.1, 128
    h = 1.0 / n
    P, phi = 0.5, 0.0
    for i in range(n - 1, -1, -1):
        b = np.array([0.4, 0.8, 0.4]) + 0.2 * math.sin(2 * math.pi * i * h)
        M = P * MV_DTD + rho / vb * np.eye(3)
        phi += h * 0.5 * rho * math.log(np.linalg.det(vb * M / rho))
        P -= h * P * P * b @ np.linalg.solve(M, b)
    assert mv_riccati.optimal_cost == pytest.approx(0.5 * 0.26 * P + phi, abs=1e-14)
    assert mv_riccati.strongly_regular


def test_policy_value_at_optimum_equals_riccati(mv_model, mv_riccati, mv_theta_star):
    sol = solve_trajectory(mv_model, mv_theta_star, mv_riccati.grid)
    assert np.max(np.abs(sol.P - mv_riccati.P_star)) < 1e-12
    assert cost(mv_model, mv_theta_star, mv_riccati.grid) == pytest.approx(mv_riccati.optimal_cost, abs=1e-13)


def test_optimal_cost_below_random_policies(mv_model, mv_riccati):
    rng = np.random.default_rng(5)
    g = TimeGrid.uniform(1.0, 16)
    for _ in range(10):
        th = random_policy(rng, g, 3, 1)
        P = solve_policy_lyapunov(mv_model, th, mv_riccati.grid)
        assert cost(mv_model, th, mv_riccati.grid) >= mv_riccati.optimal_cost
        assert np.all(P[:, 0, 0] >= mv_riccati.P_star[:, 0, 0] - 1e-12)


def test_optimal_covariance_envelope(mv_riccati):
    ev = np.linalg.eigvalsh(mv_riccati.V_step)
    rho = 0.01
    assert ev.min() >= rho / mv_riccati.lambda_max - 1e-12
    assert ev.max() <= rho / mv_riccati.delta_tilde + 1e-12


def test_riccati_richardson_ratio():
    m = scalar_model(**PARAMS)
    fine = solve_riccati(m, TimeGrid.uniform(1.0, 256), "rk4").P_star[0, 0, 0]
    e = [abs(solve_riccati(m, TimeGrid.uniform(1.0, n)).P_star[0, 0, 0] - fine) for n in (32, 64, 128)]
    assert 1.8 < e[0] / e[1] < 2.2 and 1.8 < e[1] / e[2] < 2.2


def test_riccati_rk4_cost_close_to_euler(mv_model):
    c_rk4 = solve_riccati(mv_model, TimeGrid.uniform(1.0, 128), "rk4").optimal_cost
    c_fine = solve_riccati(mv_model, TimeGrid.uniform(1.0, 4096)).optimal_cost
    assert c_rk4 == pytest.approx(c_fine, abs=2e-5)


def test_riccati_singularity_reports_time():
    m = scalar_model(r=-0.1, rho=0.1, vbar=1.0, b=0.0, dd=0.0)
    with pytest.raises(SingularityError, match="strong regularity lost at t="):
        solve_riccati(m, TimeGrid.uniform(1.0, 8))


def test_covariance_psd_loss_on_coarse_grid():
    m = scalar_model(a=-100.0)
    g = TimeGrid.uniform(1.0, 4)
    th = Policy(g, [[0.0]], [[1.0]])
    with pytest.raises(NumericalError, match="covariance lost PSD at t="):
        solve_state_covariance(m, th, g)


def test_phi_vanishes_for_reference_covariance():
    m = scalar_model(dd=0.0, r=0.0, vbar=0.7, a=0.2, b=0.3)
    g = TimeGrid.uniform(1.0, 8)
    th = Policy(g, [[0.5]], [[0.7]])
    for method in ("euler", "rk4"):
        P = solve_policy_lyapunov(m, th, method=method)
        assert np.allclose(solve_phi(m, th, P, method=method), 0.0, atol=1e-15)


def test_representation_gap_shrinks(mv_model):
    rng = np.random.default_rng(11)
    th = random_policy(rng, TimeGrid.uniform(1.0, 8), 3, 1)
    assert evaluate_cost(mv_model, th, TimeGrid.uniform(1.0, 1024), "rk4").representation_gap <= 1e-5
    # explicit Euler: route 1 is the exact discrete cost, the trapezoid route differs at first order
    gaps = [evaluate_cost(mv_model, th, TimeGrid.uniform(1.0, n)).representation_gap for n in (256, 512, 1024)]
    assert 1.8 < gaps[0] / gaps[1] < 2.2 and 1.8 < gaps[1] / gaps[2] < 2.2


def test_trajectory_csv(tmp_path, mv_model):
    th = Policy(TimeGrid.uniform(1.0, 4), np.full((3, 1), 0.2), 0.1 * MV_DTD)
    sol = solve_trajectory(mv_model, th, TimeGrid.uniform(1.0, 16))
    path = tmp_path / "traj.csv"
    sol.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,P_00,Sigma_00,phi"
    assert len(lines) == 18


def test_unknown_method(mv_model, mv_theta0):
    with pytest.raises(ValueError):
        cost(mv_model, mv_theta0, method="heun")
