import numpy as np
import pytest

from lqpg.model import LqcModel, TimeGrid
from lqpg.ode import optimal_policy, solve_riccati
from lqpg.presets import mean_variance_model, mean_variance_theta0


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed again in the terminal summary."""

    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mv_model():
    return mean_variance_model()


@pytest.fixture(scope="session")
def grid128():
    return TimeGrid.uniform(1.0, 128)


@pytest.fixture(scope="session")
def mv_riccati(mv_model, grid128):
    return solve_riccati(mv_model, grid128)


@pytest.fixture(scope="session")
def mv_theta_star(mv_model, mv_riccati):
    return optimal_policy(mv_model, mv_riccati)


@pytest.fixture(scope="session")
def mv_theta0(grid128):
    return mean_variance_theta0(grid128)


def scalar_model(a=0.0, b=0.0, c=0.0, dd=0.0, q=0.0, s=0.0, r=0.0, g=1.0, rho=0.1, vbar=1.0, sigma0=1.0, T=1.0):
    """Scalar problem with constant coefficients."""
    m = lambda x: np.array([[float(x)]])  # noqa: E731
    return LqcModel.build(
        A=m(a), B=m(b), C=m(c), D=m(dd), Q=m(q), S=m(s), R=m(r), G=m(g), rho=rho, Vbar=m(vbar), T=T, Sigma0=m(sigma0)
    )


def zero_model(d=1, k=1, g=None, vbar=None, sigma0=None, rho=0.1):
    z = lambda r, c: np.zeros((r, c))  # noqa: E731
    return LqcModel.build(
        A=z(d, d), B=z(d, k), C=z(d, d), D=z(d, k), Q=z(d, d), S=z(k, d), R=z(k, k),
        G=np.eye(d) if g is None else g, rho=rho, Vbar=np.eye(k) if vbar is None else vbar,
        Sigma0=np.eye(d) if sigma0 is None else sigma0,
    )
