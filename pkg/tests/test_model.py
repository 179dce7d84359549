import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqpg.model import (
    Constant,
    Loewner,
    LqcModel,
    NumericalError,
    Policy,
    SingularityError,
    TimeGrid,
    loewner_compare,
    psd_sqrt,
    relative_entropy_gaussian,
    spd_inv,
    validate_model,
)
from lqpg.presets import MV_DTD, mean_variance_model


def kl_quadrature(mean: float, v: float, vbar: float) -> float:
    """KL(N(mean, v) || N(0, vbar)) by brute-force quadrature of the densities."""
    s = math.sqrt(v)
    x = np.linspace(mean - 12 * s, mean + 12 * s, 200_001)
    p = np.exp(-0.5 * (x - mean) ** 2 / v) / math.sqrt(2 * math.pi * v)
    logp = -0.5 * (x - mean) ** 2 / v - 0.5 * math.log(2 * math.pi * v)
    logq = -0.5 * x**2 / vbar - 0.5 * math.log(2 * math.pi * vbar)
    return float(np.trapezoid(p * (logp - logq), x))


def expected_kl_quadrature(K: float, v: float, vbar: float, M: float) -> float:
    # the mean term is quadratic in x, so E over x only needs the second moment
    return kl_quadrature(0.0, v, vbar) + (kl_quadrature(K * math.sqrt(M), v, vbar) - kl_quadrature(0.0, v, vbar))


# ---------------------------------------------------------------------------
# symmetric-matrix primitives
# ---------------------------------------------------------------------------


def test_psd_sqrt_examples():
    assert np.allclose(psd_sqrt(np.eye(3)), np.eye(3))
    assert np.allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


def test_psd_sqrt_rejects_negative():
    with pytest.raises(ValueError, match="not PSD"):
        psd_sqrt(np.diag([1.0, -1.0]))


def test_psd_sqrt_clamps_tiny_negative():
    S = psd_sqrt(np.diag([1.0, -1e-13]))
    assert np.allclose(S, np.diag([1.0, 0.0]))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_psd_sqrt_reconstruction(n, seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n))
    M = L @ L.T + 1e-3 * np.eye(n)
    S = psd_sqrt(M)
    assert np.allclose(S, S.T, atol=0)
    assert np.linalg.norm(S @ S.T - M) <= 1e-10 * np.linalg.norm(M)


@settings(max_examples=30, deadline=None)
@given(diag=st.lists(st.floats(0.0, 100.0), min_size=1, max_size=6))
def test_psd_sqrt_idempotent_on_diagonal(diag):
    D = np.diag(diag)
    assert np.allclose(psd_sqrt(D), np.diag(np.sqrt(diag)))


def test_spd_inv_singular_reports_index():
    stack = np.array([np.eye(2), np.diag([1.0, 0.0])])
    with pytest.raises(SingularityError) as exc:
        spd_inv(stack)
    assert exc.value.index == 1


def test_loewner_examples():
    assert loewner_compare(np.eye(2), np.zeros((2, 2))) is Loewner.GEQ
    assert loewner_compare(np.zeros((2, 2)), np.eye(2)) is Loewner.LEQ
    assert loewner_compare(np.eye(2), np.eye(2)) is Loewner.EQUAL
    assert loewner_compare(np.diag([1.0, 2.0]), np.diag([2.0, 1.0])) is Loewner.INCOMPARABLE


def test_loewner_benchmark_gain_above_half_margin(mv_model, mv_riccati):
    c = mv_model.coefficients(mv_riccati.grid.nodes)
    gains = np.einsum("npik,nij,npjl->nkl", c.D, mv_riccati.P_star, c.D) + mv_model.rho * c.Vbar_inv
    dt = 0.5 * float(np.linalg.eigvalsh(gains)[:, 0].min())
    assert all(loewner_compare(G, dt * np.eye(3)) is Loewner.GEQ for G in gains)


# ---------------------------------------------------------------------------
# relative entropy
# ---------------------------------------------------------------------------


def test_relative_entropy_identical_gaussians():
    Vbar = np.array([[2.0, 0.3], [0.3, 1.0]])
    val = relative_entropy_gaussian(np.zeros((2, 3)), Vbar, Vbar, np.eye(3) * 5)
    assert abs(val) <= 1e-12


def test_relative_entropy_examples_against_quadrature():
    assert relative_entropy_gaussian([[1.0]], [[2.0]], [[2.0]], [[3.0]]) == pytest.approx(0.75, abs=1e-12)
    assert expected_kl_quadrature(1.0, 2.0, 2.0, 3.0) == pytest.approx(0.75, abs=1e-6)
    e = math.e
    val = relative_entropy_gaussian([[0.0]], [[e]], [[1.0]], [[1.0]])
    assert val == pytest.approx(0.5 * (e - 2), abs=1e-12)
    assert kl_quadrature(0.0, e, 1.0) == pytest.approx(0.359141, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(
    K=st.floats(-2, 2), v=st.floats(0.05, 4), vbar=st.floats(0.05, 4), M=st.floats(0, 3)
)
def test_relative_entropy_matches_quadrature(K, v, vbar, M):
    val = relative_entropy_gaussian([[K]], [[v]], [[vbar]], [[M]])
    assert val == pytest.approx(expected_kl_quadrature(K, v, vbar, M), abs=1e-6)
    assert val >= -1e-12


def test_relative_entropy_rejects_non_pd():
    with pytest.raises(NumericalError):
        relative_entropy_gaussian([[0.0]], [[0.0]], [[1.0]], [[1.0]])
    with pytest.raises(NumericalError):
        relative_entropy_gaussian([[0.0]], [[1.0]], [[-1.0]], [[1.0]])


# ---------------------------------------------------------------------------
# grids, policies, models
# ---------------------------------------------------------------------------


def test_time_grid_basics():
    g = TimeGrid.uniform(2.0, 4)
    assert g.T == 2.0 and g.n == 4 and g.mesh == pytest.approx(0.5)
    assert g.refine(2).is_refinement_of(g)
    assert not g.is_refinement_of(g.refine(2))
    assert list(g.interval_of(np.array([0.0, 0.49, 0.5, 1.99]))) == [0, 0, 1, 3]
    assert g == TimeGrid.uniform(2.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.4, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 1.0]))


def test_policy_validation_and_broadcast():
    g = TimeGrid.uniform(1.0, 4)
    p = Policy(g, np.ones((2, 1)), np.eye(2))
    assert p.K.shape == (4, 2, 1) and p.V.shape == (4, 2, 2)
    assert p.in_theta and p.eps == pytest.approx(1.0)
    with pytest.raises(ValueError, match="positive definite"):
        Policy(g, np.ones((2, 1)), np.diag([1.0, 0.0]))
    bad = p.with_values(V=np.diag([1.0, -1.0]))
    assert not bad.in_theta
    with pytest.raises(ValueError):
        Policy(g, np.ones((3, 2, 1)), np.eye(2))


def test_policy_on_refinement():
    g = TimeGrid.uniform(1.0, 2)
    K = np.array([[[1.0]], [[2.0]]])
    p = Policy(g, K, np.ones((2, 1, 1)))
    Kf, _ = p.on(g.refine(3))
    assert list(Kf.ravel()) == [1, 1, 1, 2, 2, 2]
    with pytest.raises(ValueError):
        p.on(TimeGrid.uniform(1.0, 3))


def test_validate_benchmark_ok(grid128):
    rep = validate_model(mean_variance_model(), grid128)
    assert rep.ok and rep.delta == pytest.approx(0.1)


def test_validate_rho_zero(grid128):
    m = mean_variance_model().replace(rho=0.0)
    rep = validate_model(m, grid128)
    assert not rep.ok and "rho must be positive" in rep.violations


def test_validate_singular_vbar(grid128):
    m = mean_variance_model().replace(Vbar=Constant(np.diag([0.1, 0.0, 0.1])))
    rep = validate_model(m, grid128)
    assert "Vbar not uniformly positive definite" in rep.violations
    assert validate_model(m, grid128) == rep  # pure


def test_dimension_mismatch_is_hard_error():
    with pytest.raises(ValueError, match="dimension mismatch for D"):
        LqcModel.build(
            A=np.zeros((1, 1)), B=np.zeros((1, 3)), C=np.zeros((1, 1)), D=np.zeros((1, 2)),
            Q=np.zeros((1, 1)), S=np.zeros((3, 1)), R=np.zeros((3, 3)), G=np.eye(1), rho=0.1,
            Vbar=np.eye(3), Sigma0=np.eye(1),
        )


def test_symmetrization_warns():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        m = LqcModel.build(
            A=np.zeros((2, 2)), B=np.zeros((2, 1)), C=np.zeros((2, 2)), D=np.zeros((2, 1)),
            Q=np.array([[1.0, 0.1], [0.0, 1.0]]), S=np.zeros((1, 2)), R=np.zeros((1, 1)), G=np.eye(2),
            rho=0.1, Vbar=np.eye(1), Sigma0=np.eye(2),
        )
        Q = m.coefficients(np.array([0.0])).Q[0]
    assert any("symmetri" in str(w.message) for w in rec)
    assert np.allclose(Q, Q.T)


def test_benchmark_channels_reproduce_gram():
    m = mean_variance_model()
    c = m.coefficients(np.array([0.3]))
    gram = np.einsum("pik,pil->kl", c.D[0], c.D[0])
    assert np.allclose(gram, MV_DTD, atol=1e-14)
    assert m.Sigma0[0, 0] == pytest.approx(0.26)
    B = c.B[0, 0]
    assert np.allclose(B, np.array([0.4, 0.8, 0.4]) + 0.2 * math.sin(2 * math.pi * 0.3))
