import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scalar_model
from lqpg.gradient import bw_gradient_V, directional_derivative, gradient_field, gradient_K, gradient_V
from lqpg.landscape import fd_gradient_check, random_model, random_policy
from lqpg.model import Policy, TimeGrid
from lqpg.ode import solve_policy_lyapunov, solve_trajectory


def test_gradients_vanish_at_discrete_optimum(mv_model, mv_riccati, mv_theta_star):
    fld = gradient_field(mv_model, mv_theta_star, grid=mv_riccati.grid)
    gk, gv = fld.l2_norms()
    assert gk <= 1e-10 and gv <= 1e-10


def test_gradient_K_reduces_to_regularizer():
    m = scalar_model(a=0.4, c=0.0, b=0.0, dd=0.0, q=0.0, s=0.0, r=0.3, g=0.0, rho=0.2, vbar=0.5)
    g = TimeGrid.uniform(1.0, 4)
    th = Policy(g, np.array([[[0.1]], [[-0.4]], [[0.7]], [[2.0]]]), [[0.3]])
    P = solve_policy_lyapunov(m, th, g)
    assert np.max(np.abs(P)) > 0  # entropy term feeds P; the K field ignores it without B, D, S
    DK = gradient_K(m, th, P, g)
    assert np.allclose(DK, (0.3 + 0.2 / 0.5) * th.K, rtol=1e-14)


def test_gradient_V_vanishes_at_reference_covariance():
    m = scalar_model(a=0.4, b=0.5, dd=0.0, r=0.0, rho=0.2, vbar=0.5, q=1.0)
    g = TimeGrid.uniform(1.0, 4)
    th = Policy(g, [[0.3]], [[0.5]])
    P = solve_policy_lyapunov(m, th, g)
    assert np.allclose(gradient_V(m, th, P, g), 0.0, atol=1e-15)


def test_bw_examples():
    assert np.array_equal(bw_gradient_V(np.zeros((2, 2)), np.eye(2)), np.zeros((2, 2)))
    assert bw_gradient_V(np.array([[3.0]]), np.array([[0.5]]))[0, 0] == pytest.approx(3.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 5), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_bw_symmetric_and_bilinear(seed, k, a, b):
    rng = np.random.default_rng(seed)
    S = lambda: (lambda X: X + X.T)(rng.normal(size=(k, k)))  # noqa: E731
    G1, G2, V1, V2 = S(), S(), S(), S()
    out = bw_gradient_V(G1, V1)
    assert np.max(np.abs(out - out.T)) <= 1e-14 * max(1.0, np.abs(out).max())
    lin = bw_gradient_V(a * G1 + b * G2, V1)
    assert np.allclose(lin, a * bw_gradient_V(G1, V1) + b * bw_gradient_V(G2, V1), atol=1e-12)
    lin = bw_gradient_V(G1, a * V1 + b * V2)
    assert np.allclose(lin, a * bw_gradient_V(G1, V1) + b * bw_gradient_V(G1, V2), atol=1e-12)


def test_field_consistency(mv_model, mv_theta0):
    fld = gradient_field(mv_model, mv_theta0)
    assert np.allclose(fld.vanilla_K, fld.DK @ fld.Sigma)
    assert np.allclose(fld.DV, np.swapaxes(fld.DV, 1, 2))
    assert np.allclose(fld.DV_bw, np.swapaxes(fld.DV_bw, 1, 2))
    gK, gV = fld.interval_integrals(TimeGrid.uniform(1.0, 1))
    h = fld.grid.steps[:, None, None]
    assert np.allclose(gK[0], np.sum(h * fld.vanilla_K, axis=0))
    assert np.allclose(gV[0], np.sum(h * fld.DV, axis=0))


@pytest.mark.parametrize("method", ["euler", "rk4"])
@pytest.mark.parametrize("case", range(12))
def test_directional_derivative_matches_fd(case, method):
    rng = np.random.default_rng([2024, case])
    d = k = 1 if case % 2 == 0 else 2
    model = random_model(rng, d, k, p=1 + case % 3)
    g = TimeGrid.uniform(1.0, 8)
    th = random_policy(rng, g, k, d)
    dK = rng.uniform(-1, 1, th.K.shape)
    dV = random_policy(rng, g, k, d).V - th.V  # direction V' - V
    assert fd_gradient_check(model, th, (dK, dV), 1e-4, g.refine(64), method) <= 1e-4
    assert fd_gradient_check(model, th, (dK, np.zeros_like(dV)), 1e-4, g.refine(64), method) <= 1e-4


def test_fd_check_zero_direction_and_shrink_h():
    rng = np.random.default_rng(0)
    model = random_model(rng, 1, 1)
    th = Policy(TimeGrid.uniform(1.0, 2), [[0.2]], [[0.01]])
    assert fd_gradient_check(model, th, (np.zeros((1, 1)), np.zeros((1, 1)))) == 0.0
    with pytest.raises(ValueError, match="shrink h"):
        fd_gradient_check(model, th, (np.zeros((1, 1)), np.eye(1)), h=0.1)


def test_fd_h_sweep_pattern():
    rng = np.random.default_rng(3)
    model = random_model(rng, 1, 1)
    g = TimeGrid.uniform(1.0, 8)
    th = random_policy(rng, g, 1, 1)
    direction = (rng.uniform(-1, 1, th.K.shape), random_policy(rng, g, 1, 1).V - th.V)
    errs = [fd_gradient_check(model, th, direction, h, g.refine(16)) for h in (1e-2, 1e-3, 1e-4)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-6


def test_directional_derivative_trapezoid_for_rk4(mv_model, mv_theta0):
    sol = solve_trajectory(mv_model, mv_theta0, method="rk4")
    dd = directional_derivative(mv_model, mv_theta0, np.ones((3, 1)), np.zeros((3, 3)), method="rk4", solution=sol)
    assert np.isfinite(dd)
