"""Model-free layer: Euler-Maruyama simulation of the randomized dynamics.

Actions are ``a = K x + V^{1/2} zeta`` with ``zeta`` standard normal and
refreshed on every interval of the randomisation grid.  Random numbers come
from Philox streams keyed by ``(seed, stream, block)`` where a block holds a
fixed number of paths, so path ``l`` sees the same noise whatever the total
path count.  Within a block the draw order is ``xi0``, ``zeta``, ``dW``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .gradient import bw_gradient_V
from .model import LqcModel, NumericalError, Policy, TimeGrid, psd_sqrt, spd_inv, sym
from .pg import PgConfig, RunRecord

log = logging.getLogger(__name__)

BLOCK = 1024
SIGMA_REG = 1e-8


@dataclass(frozen=True)
class SimConfig:
    num_paths: int
    sim_grid: TimeGrid
    seed: int = 0
    randomisation_grid: TimeGrid | None = None  # default: sim_grid
    xi0_mean: np.ndarray | None = None  # default: taken from the model
    xi0_cov: np.ndarray | None = None
    block_size: int = BLOCK

    def __post_init__(self):
        if self.num_paths < 1:
            raise ValueError("num_paths must be >= 1")
        rg = self.randomisation_grid
        if rg is not None and not self.sim_grid.is_refinement_of(rg):
            raise ValueError("randomisation grid nodes must be sim-grid nodes")

    @property
    def rand_grid(self) -> TimeGrid:
        return self.randomisation_grid or self.sim_grid


@dataclass(frozen=True)
class McEstimate:
    value: np.ndarray | float
    std_error: np.ndarray | float
    num_paths: int

    def band(self, k: float = 3.0, extra: float = 0.0):
        return np.asarray(self.value) - k * np.asarray(self.std_error) - extra, np.asarray(self.value) + k * np.asarray(self.std_error) + extra


@dataclass
class Ensemble:
    """Result of :func:`simulate_paths`.

    Per-path cost pieces are always kept.  Node moments are accumulated as
    sums so that estimates never need the full state array; ``states`` is
    only filled when requested.
    """

    grid: TimeGrid
    num_paths: int
    quad: np.ndarray
    entropy: np.ndarray
    terminal: np.ndarray
    mean_sum: np.ndarray
    moment_sum: np.ndarray
    moment_sqsum: np.ndarray
    states: np.ndarray | None = None
    grad_K: np.ndarray | None = None  # per-path sums, shape (paths, n_int, k, d)
    grad_V: np.ndarray | None = None

    @property
    def path_costs(self) -> np.ndarray:
        return self.quad + self.entropy + self.terminal

    def to_csv(self, path) -> None:
        """Node summary: t, mean state, second moments and their standard errors."""
        d = self.mean_sum.shape[1]
        N = self.num_paths
        mean = self.mean_sum / N
        est = estimate_covariance(self)
        head = ["t"] + [f"mean_{i}" for i in range(d)]
        head += [f"m2_{i}{j}" for i in range(d) for j in range(d)]
        head += [f"se_{i}{j}" for i in range(d) for j in range(d)]
        with open(path, "w", newline="") as fh:
            fh.write(",".join(head) + "\n")
            for n, t in enumerate(self.grid.nodes):
                vals = [t, *mean[n], *np.ravel(est[n].value), *np.ravel(est[n].std_error)]
                fh.write(",".join(repr(float(v)) for v in vals) + "\n")


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


def _block_noise(seed: int, stream: int, block: int, size: int, d: int, n_rand: int, k: int, n_sim: int, p: int):
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, block])))
    xi = gen.standard_normal((size, d))
    zeta = gen.standard_normal((size, n_rand, k))
    dW = gen.standard_normal((size, n_sim, p))
    return xi, zeta, dW


def _xi0_law(model: LqcModel, cfg: SimConfig):
    mean = cfg.xi0_mean if cfg.xi0_mean is not None else model.xi0_mean
    cov = cfg.xi0_cov if cfg.xi0_cov is not None else model.xi0_cov
    if mean is None:
        # only the second moment is known: centred Gaussian with that covariance
        mean, cov = np.zeros(model.d), model.Sigma0
    return np.atleast_1d(np.asarray(mean, dtype=float)), psd_sqrt(np.atleast_2d(np.asarray(cov, dtype=float)))


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _StepData:
    h: np.ndarray
    pol: np.ndarray  # policy interval of every sim step
    rnd: np.ndarray  # randomisation interval of every sim step
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    KVK: np.ndarray  # K^T Vbar^-1 K per step
    ent_const: np.ndarray  # tr(Vbar^-1 V) - k + ln det Vbar - ln det V per step
    Vbar_inv: np.ndarray
    G: np.ndarray
    CD: np.ndarray  # channels stacked as (p*d) x (d+k) per step
    VK: np.ndarray  # Vbar^-1 K per step


def _prepare(model: LqcModel, theta: Policy, cfg: SimConfig):
    grid = cfg.sim_grid
    if not grid.is_refinement_of(theta.grid):
        raise ValueError("policy grid nodes must be sim-grid nodes")
    c = model.coefficients(grid.left)
    pol = theta.grid.interval_of(grid.left)
    rnd = cfg.rand_grid.interval_of(grid.left)
    K = theta.K[pol]
    V = theta.V[pol]
    _, logdet_v = np.linalg.slogdet(V)
    ent = np.einsum("nij,nji->n", c.Vbar_inv, V) - model.k + c.logdet_Vbar - logdet_v
    VK = c.Vbar_inv @ K
    KVK = np.swapaxes(K, 1, 2) @ VK
    n, p, d = c.C.shape[:3]
    CD = np.concatenate([c.C, c.D], axis=3).reshape(n, p * d, d + model.k)
    return _StepData(
        h=grid.steps, pol=pol, rnd=rnd, A=c.A, B=c.B, C=c.C, D=c.D, Q=c.Q, S=c.S, R=c.R,
        KVK=KVK, ent_const=ent, Vbar_inv=c.Vbar_inv, G=model.G, CD=CD, VK=VK,
    )


def _simulate_block(model, theta, st: _StepData, roots, xi, zeta, dW, want_states: bool, want_grad: bool):
    """Forward pass (and optional adjoint pass) for one block of paths."""
    n = st.h.size
    size, d = xi.shape
    rho = model.rho
    K_all, p = theta.K, st.C.shape[1]
    X = xi
    quad = np.zeros(size)
    ent = np.zeros(size)
    keep = want_states or want_grad
    Xs = np.empty((size, n + 1, d)) if keep else None
    As = np.empty((size, n, model.k)) if want_grad else None
    mean_sum = np.empty((n + 1, d))
    mom = np.empty((n + 1, d, d))
    mom_sq = np.empty((n + 1, d, d))

    def record(i, X):
        mean_sum[i] = X.sum(axis=0)
        outer = X[:, :, None] * X[:, None, :]
        mom[i] = outer.sum(axis=0)
        mom_sq[i] = (outer**2).sum(axis=0)

    for s in range(n):
        h = st.h[s]
        i = st.pol[s]
        K = K_all[i]
        if keep:
            Xs[:, s] = X
        record(s, X)
        a = X @ K.T + zeta[:, st.rnd[s]] @ roots[i].T
        if want_grad:
            As[:, s] = a
        quad += h * (
            0.5 * np.sum((X @ st.Q[s]) * X, axis=1)
            + np.sum((a @ st.S[s]) * X, axis=1)
            + 0.5 * np.sum((a @ st.R[s]) * a, axis=1)
        )
        ent += h * 0.5 * rho * (np.sum((X @ st.KVK[s]) * X, axis=1) + st.ent_const[s])
        y = np.concatenate([X, a], axis=1) @ st.CD[s].T
        noise = np.sum(dW[:, s, :, None] * y.reshape(size, p, d), axis=1)
        X = X + h * (X @ st.A[s].T + a @ st.B[s].T) + noise
    if keep:
        Xs[:, n] = X
    record(n, X)
    terminal = 0.5 * np.einsum("bi,ij,bj->b", X, st.G, X)
    if not np.all(np.isfinite(X)):
        raise NumericalError("simulation blew up; refine the simulation grid")
    gK = gV = None
    if want_grad:
        gK, gV = _adjoint_block(model, theta, st, roots, Xs, As, zeta, dW)
    return quad, ent, terminal, mean_sum, mom, mom_sq, (Xs if want_states else None), gK, gV


def _adjoint_block(model, theta, st: _StepData, roots, Xs, As, zeta, dW):
    """Reverse-mode derivative of every path cost with respect to ``K_i`` and ``V_i``."""
    n = st.h.size
    size, _, d = Xs.shape
    rho = model.rho
    n_int = theta.grid.n
    # interval-major layout keeps the per-step accumulation contiguous
    gK = np.zeros((n_int, size) + theta.K.shape[1:])
    gS = np.zeros((n_int, size) + theta.V.shape[1:])
    lam = Xs[:, n] @ st.G.T
    for s in range(n - 1, -1, -1):
        h = st.h[s]
        i = st.pol[s]
        K = theta.K[i]
        X = Xs[:, s]
        a = As[:, s]
        z = zeta[:, st.rnd[s]]
        w = dW[:, s]
        # derivative of the path cost with respect to the action at step s
        wl = (w[:, :, None] * lam[:, None, :]).reshape(size, -1) @ st.CD[s]  # sum_p w_p [C_p D_p]^T lam
        g_a = h * (lam @ st.B[s] + X @ st.S[s].T + a @ st.R[s].T) + wl[:, d:]
        gK[i] += (g_a + h * rho * X @ st.VK[s].T)[:, :, None] * X[:, None, :]
        gS[i] += g_a[:, :, None] * z[:, None, :]
        lam = (
            lam
            + h * (lam @ st.A[s] + X @ st.Q[s].T + a @ st.S[s] + rho * X @ st.KVK[s].T)
            + wl[:, :d]
            + g_a @ K
        )
    # chain rule through the symmetric square root, plus the explicit log-det term
    gV = np.empty_like(gS)
    for i in range(n_int):
        w_, U = np.linalg.eigh(theta.V[i])
        sq = np.sqrt(w_)
        denom = sq[:, None] + sq[None, :]
        Gt = U.T @ sym(gS[i]) @ U
        gV[i] = U @ (Gt / denom) @ U.T
    steps = np.zeros(n_int)
    np.add.at(steps, st.pol, st.h)
    Vbar_inv_int = np.zeros_like(theta.V)
    np.add.at(Vbar_inv_int, st.pol, st.h[:, None, None] * st.Vbar_inv)
    direct = 0.5 * rho * (Vbar_inv_int - steps[:, None, None] * spd_inv(theta.V))
    return np.swapaxes(gK, 0, 1), np.swapaxes(sym(gV + direct[:, None]), 0, 1)


def simulate_paths(
    model: LqcModel,
    theta: Policy,
    cfg: SimConfig,
    keep_states: bool = False,
    pathwise_gradient: bool = False,
    stream: int = 0,
) -> Ensemble:
    """Simulate ``cfg.num_paths`` Euler-Maruyama paths under ``theta``.

    Blocks of ``cfg.block_size`` paths are always drawn in full and then
    truncated, so results for the first ``N`` paths do not depend on the
    requested total.
    """
    st = _prepare(model, theta, cfg)
    mean, cov_root = _xi0_law(model, cfg)
    roots = psd_sqrt(theta.V)
    n = cfg.sim_grid.n
    d, k, p = model.d, model.k, model.p
    n_rand = cfg.rand_grid.n
    parts = []
    remaining = cfg.num_paths
    block = 0
    while remaining > 0:
        size = min(remaining, cfg.block_size)
        xi, zeta, dW = _block_noise(cfg.seed, stream, block, cfg.block_size, d, n_rand, k, n, p)
        xi = mean + xi[:size] @ cov_root.T
        dW = dW[:size] * np.sqrt(st.h)[None, :, None]
        parts.append(_simulate_block(model, theta, st, roots, xi, zeta[:size], dW, keep_states, pathwise_gradient))
        remaining -= size
        block += 1
    cat = lambda j: np.concatenate([q[j] for q in parts]) if parts[0][j] is not None else None  # noqa: E731
    tot = lambda j: np.sum([q[j] for q in parts], axis=0)  # noqa: E731
    return Ensemble(
        grid=cfg.sim_grid,
        num_paths=cfg.num_paths,
        quad=cat(0),
        entropy=cat(1),
        terminal=cat(2),
        mean_sum=tot(3),
        moment_sum=tot(4),
        moment_sqsum=tot(5),
        states=cat(6),
        grad_K=cat(7),
        grad_V=cat(8),
    )


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def _mean_se(x: np.ndarray) -> McEstimate:
    N = x.shape[0]
    mean = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / np.sqrt(N) if N > 1 else np.zeros_like(mean)
    return McEstimate(mean, se, N)


def estimate_cost(ensemble: Ensemble) -> McEstimate:
    """Mean path cost with its standard error."""
    est = _mean_se(ensemble.path_costs)
    return McEstimate(float(est.value), float(est.std_error), est.num_paths)


def estimate_covariance(ensemble: Ensemble, nodes: Sequence[int] | None = None) -> list[McEstimate]:
    """Uncentred second moments ``E[X X^T]`` at sim-grid nodes with jackknife standard errors.

    For a sample mean the jackknife standard error equals the usual one, so
    it is computed from running sums.
    """
    N = ensemble.num_paths
    idx = range(ensemble.grid.n + 1) if nodes is None else nodes
    out = []
    for i in idx:
        m = ensemble.moment_sum[i] / N
        if N > 1:
            var = np.maximum(ensemble.moment_sqsum[i] / N - m**2, 0.0) * N / (N - 1)
            se = np.sqrt(var / N)
        else:
            se = np.zeros_like(m)
        out.append(McEstimate(m, se, N))
    return out


@dataclass(frozen=True)
class GradientEstimate:
    """Per-interval gradient estimates ``d C / d K_i`` and ``d C / d V_i``."""

    grid: TimeGrid
    K: np.ndarray
    K_se: np.ndarray
    V: np.ndarray
    V_se: np.ndarray
    cost: McEstimate | None = None


def _sym_basis(k: int):
    for a in range(k):
        for b in range(a, k):
            E = np.zeros((k, k))
            E[a, b] = E[b, a] = 1.0
            yield a, b, E


def estimate_gradient_fd_crn(
    model: LqcModel, theta: Policy, cfg: SimConfig, h: float = 1e-3, stream: int = 0
) -> GradientEstimate:
    """Central differences of the simulated cost per parameter entry with common random numbers.

    Symmetric ``V`` entries are perturbed in pairs; the reported ``V``
    gradient is the symmetric matrix ``G`` with ``dC = <G, dV>``.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    n_int, k, d = theta.K.shape
    gK = np.zeros(theta.K.shape)
    sK = np.zeros(theta.K.shape)
    gV = np.zeros(theta.V.shape)
    sV = np.zeros(theta.V.shape)

    def diff(dK, dV):
        plus = theta.with_values(theta.K + h * dK, theta.V + h * dV)
        minus = theta.with_values(theta.K - h * dK, theta.V - h * dV)
        if not (plus.in_theta and minus.in_theta):
            raise ValueError("perturbed covariance is not positive definite; shrink h")
        cp = simulate_paths(model, plus, cfg, stream=stream).path_costs
        cm = simulate_paths(model, minus, cfg, stream=stream).path_costs
        return _mean_se((cp - cm) / (2 * h))

    for i in range(n_int):
        for a in range(k):
            for b in range(d):
                dK = np.zeros_like(theta.K)
                dK[i, a, b] = 1.0
                e = diff(dK, np.zeros_like(theta.V))
                gK[i, a, b], sK[i, a, b] = e.value, e.std_error
        for a, b, E in _sym_basis(k):
            dV = np.zeros_like(theta.V)
            dV[i] = E
            e = diff(np.zeros_like(theta.K), dV)
            scale = 1.0 if a == b else 0.5
            gV[i, a, b] = gV[i, b, a] = scale * e.value
            sV[i, a, b] = sV[i, b, a] = scale * e.std_error
    return GradientEstimate(theta.grid, gK, sK, gV, sV)


def estimate_gradient_pathwise(
    model: LqcModel, theta: Policy, cfg: SimConfig, stream: int = 0
) -> tuple[GradientEstimate, Ensemble]:
    """Reverse-mode derivative of each simulated path cost, averaged over paths."""
    ens = simulate_paths(model, theta, cfg, pathwise_gradient=True, stream=stream)
    k_est = _mean_se(ens.grad_K)
    v_est = _mean_se(ens.grad_V)
    est = GradientEstimate(theta.grid, k_est.value, k_est.std_error, v_est.value, v_est.std_error, estimate_cost(ens))
    ens.grad_K = ens.grad_V = None  # large; not needed after averaging
    return est, ens


# ---------------------------------------------------------------------------
# deterministic moments of the Euler-Maruyama scheme
# ---------------------------------------------------------------------------


def expected_em_cost(model: LqcModel, theta: Policy, cfg: SimConfig) -> tuple[float, np.ndarray]:
    """Exact expectation of the simulated cost and node second moments.

    Propagates ``E[X X^T]`` and ``E[X zeta^T]`` through one Euler-Maruyama
    step in closed form; the cross moment restarts at zero whenever a fresh
    ``zeta`` is drawn.
    """
    st = _prepare(model, theta, cfg)
    roots = psd_sqrt(theta.V)
    mean, cov_root = _xi0_law(model, cfg)
    Sx = np.outer(mean, mean) + cov_root @ cov_root.T
    n = st.h.size
    k = model.k
    Sxz = np.zeros((model.d, k))
    moments = np.empty((n + 1, model.d, model.d))
    total = 0.0
    prev_r = -1
    for s in range(n):
        h = st.h[s]
        i = st.pol[s]
        K, Sr = theta.K[i], roots[i]
        if st.rnd[s] != prev_r:
            Sxz = np.zeros_like(Sxz)
            prev_r = st.rnd[s]
        moments[s] = Sx
        Eax = K @ Sx + Sr @ Sxz.T  # E[a x^T]
        Eaa = K @ Sx @ K.T + K @ Sxz @ Sr.T + Sr @ Sxz.T @ K.T + Sr @ Sr.T
        run = (
            0.5 * np.trace(st.Q[s] @ Sx)
            + np.trace(st.S[s] @ Eax.T)
            + 0.5 * np.trace(st.R[s] @ Eaa)
            + 0.5 * model.rho * (np.trace(st.KVK[s] @ Sx) + st.ent_const[s])
        )
        total += h * run
        F = np.eye(model.d) + h * (st.A[s] + st.B[s] @ K)
        Gm = h * st.B[s] @ Sr
        new = F @ Sx @ F.T + F @ Sxz @ Gm.T + Gm @ Sxz.T @ F.T + Gm @ Gm.T
        for j in range(model.p):
            Nj = st.C[s][j] + st.D[s][j] @ K
            Mj = st.D[s][j] @ Sr
            new += h * (Nj @ Sx @ Nj.T + Nj @ Sxz @ Mj.T + Mj @ Sxz.T @ Nj.T + Mj @ Mj.T)
        Sxz = F @ Sxz + Gm
        Sx = sym(new)
    moments[n] = Sx
    total += 0.5 * np.trace(model.G @ Sx)
    return float(total), moments


# ---------------------------------------------------------------------------
# model-free policy gradient
# ---------------------------------------------------------------------------


def _regularized_inv(S: np.ndarray, t: float) -> np.ndarray:
    w = np.linalg.eigvalsh(S)
    if w.min() <= SIGMA_REG * max(1.0, w.max()):
        log.info("regularizing estimated second moment at t=%.4g (min eigenvalue %.3e)", t, w.min())
        S = S + SIGMA_REG * np.eye(S.shape[0])
    return np.linalg.inv(S)


def run_model_free_pg(
    model: LqcModel,
    theta0: Policy,
    config: PgConfig,
    sim: SimConfig,
    reference_optimum: float,
    gradient: str = "fd_crn",
    fd_h: float = 1e-3,
    true_cost=None,
) -> RunRecord:
    """Policy gradient driven only by simulated paths.

    Each iteration draws fresh noise (stream ``n``), estimates the cost,
    per-interval gradients and second moments at interval starts, and
    applies the preconditioned update.  ``gradient`` is ``"fd_crn"`` or
    ``"pathwise"``.  ``true_cost`` (a callable on policies) may be given to
    log exact costs alongside in ``record.iterates``.
    """
    if gradient not in ("fd_crn", "pathwise"):
        raise ValueError("gradient must be 'fd_crn' or 'pathwise'")
    variant = config.variant if config.variant != "continuous" else "discrete_scaled"
    rec = RunRecord(variant=variant, tau=config.tau, reference_optimum=reference_optimum, stop_epsilon=config.stop_epsilon)
    theta = theta0
    node_idx = np.searchsorted(sim.sim_grid.nodes, theta0.grid.left - 1e-12 * theta0.grid.T)
    for n in range(config.max_iterations + 1):
        if gradient == "pathwise":
            g, ens = estimate_gradient_pathwise(model, theta, sim, stream=n)
            c_hat = g.cost
        else:
            ens = simulate_paths(model, theta, sim, stream=n)
            c_hat = estimate_cost(ens)
            g = estimate_gradient_fd_crn(model, theta, sim, fd_h, stream=n)
        rec.costs.append(float(c_hat.value))
        w = theta.grid.steps
        rec.grad_k_l2.append(float(np.sqrt(np.sum(np.sum(g.K**2, axis=(1, 2)) / w))))
        rec.grad_v_l2.append(float(np.sqrt(np.sum(np.sum(g.V**2, axis=(1, 2)) / w))))
        if true_cost is not None:
            rec.iterates.append(float(true_cost(theta)))
        if config.stop_early and c_hat.value - reference_optimum < config.stop_epsilon:
            break
        if n == config.max_iterations:
            break
        Sig = [estimate_covariance(ens, [int(j)])[0].value for j in node_idx]
        Sig_inv = np.array([_regularized_inv(S, t) for S, t in zip(Sig, theta.grid.left)])
        step = (config.tau / w if variant == "discrete_scaled" else np.full(theta.grid.n, config.tau))[:, None, None]
        K = theta.K - step * (g.K @ Sig_inv)
        V = sym(theta.V - step * bw_gradient_V(g.V, theta.V))
        theta = theta.with_values(K, V)
        if not theta.in_theta:
            rec.aborted = f"iteration {n + 1}: covariance left the positive-definite cone"
            log.warning(rec.aborted)
            break
    return rec


def default_sim_config(model: LqcModel, num_paths: int = 100_000, steps: int = 128, seed: int = 0) -> SimConfig:
    return SimConfig(num_paths=num_paths, sim_grid=TimeGrid.uniform(model.T, steps), seed=seed)


__all__ = [
    "Ensemble",
    "GradientEstimate",
    "McEstimate",
    "SimConfig",
    "default_sim_config",
    "estimate_cost",
    "estimate_covariance",
    "estimate_gradient_fd_crn",
    "estimate_gradient_pathwise",
    "expected_em_cost",
    "run_model_free_pg",
    "simulate_paths",
]
