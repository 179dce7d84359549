"""Problem data, policies and symmetric-matrix helpers.

Everything in here is immutable once built.  Coefficients are functions of
time and are only ever consumed through :meth:`TimeFunction.sample`, which
returns a stacked ``(n, rows, cols)`` array for a vector of times.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

SYM_WARN_TOL = 1e-8
PSD_TOL = 1e-10


# ---------------------------------------------------------------------------
# symmetric matrix primitives
# ---------------------------------------------------------------------------


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetric part over the last two axes."""
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def psd_sqrt(M: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in ``[-tol * scale, 0)`` are clamped to zero; anything more
    negative raises.  Works on a single matrix or a stack.
    """
    M = sym(np.asarray(M, dtype=float))
    w, U = np.linalg.eigh(M)
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if np.any(w < -tol * scale):
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return sym((U * np.sqrt(w)[..., None, :]) @ np.swapaxes(U, -1, -2))


def spd_inv(M: np.ndarray, floor: float = PSD_TOL) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix (or stack).

    Raises :class:`SingularityError` carrying the offending stack index when
    an eigenvalue falls below ``floor``.
    """
    M = sym(np.asarray(M, dtype=float))
    w, U = np.linalg.eigh(M)
    if np.any(w <= floor):
        flat = w.reshape(-1, w.shape[-1]).min(axis=1)
        idx = int(np.argmax(flat <= floor))
        raise SingularityError(idx, float(flat[idx]))
    return sym((U / w[..., None, :]) @ np.swapaxes(U, -1, -2))


class NumericalError(ArithmeticError):
    """A solve produced non-finite or structurally invalid values."""


class SingularityError(NumericalError):
    """A matrix that has to be inverted lost positive definiteness."""

    def __init__(self, index: int, eigenvalue: float, t: float | None = None):
        self.index = index
        self.eigenvalue = eigenvalue
        self.t = t
        where = f"t={t:.6g}" if t is not None else f"index {index}"
        super().__init__(f"strong regularity lost at {where} (min eigenvalue {eigenvalue:.3e})")


class Loewner(enum.Enum):
    GEQ = "geq"
    LEQ = "leq"
    EQUAL = "equal"
    INCOMPARABLE = "incomparable"


def loewner_compare(A: np.ndarray, B: np.ndarray, tol: float = 1e-10) -> Loewner:
    """Compare two symmetric matrices in the Loewner order."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    w = np.linalg.eigvalsh(sym(A - B))
    geq = bool(w.min() >= -tol)
    leq = bool(w.max() <= tol)
    if geq and leq:
        return Loewner.EQUAL
    if geq:
        return Loewner.GEQ
    if leq:
        return Loewner.LEQ
    return Loewner.INCOMPARABLE


def relative_entropy_gaussian(
    K: np.ndarray, V: np.ndarray, Vbar: np.ndarray, second_moment: np.ndarray
) -> float:
    """Expected KL divergence ``E[KL(N(Kx, V) || N(0, Vbar))]`` when ``E[xx^T]`` is given."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    Vbar = np.atleast_2d(np.asarray(Vbar, dtype=float))
    M = np.atleast_2d(np.asarray(second_moment, dtype=float))
    k = V.shape[0]
    Vbar_inv = spd_inv(Vbar)
    spd_inv(V)  # PD check only
    _, logdet_v = np.linalg.slogdet(V)
    _, logdet_vbar = np.linalg.slogdet(Vbar)
    quad = np.trace(K.T @ Vbar_inv @ K @ M)
    return 0.5 * float(quad + np.trace(Vbar_inv @ V) - k + logdet_vbar - logdet_v)


# ---------------------------------------------------------------------------
# time grids and time-dependent coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Partition ``0 = t_0 < ... < t_N = T``."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).ravel()
        if nodes.size < 2:
            raise ValueError("a grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, n: int) -> "TimeGrid":
        return cls(np.linspace(0.0, T, n + 1))

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def n(self) -> int:
        """Number of intervals."""
        return self.nodes.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def left(self) -> np.ndarray:
        return self.nodes[:-1]

    @property
    def mesh(self) -> float:
        return float(self.steps.max())

    def refine(self, factor: int) -> "TimeGrid":
        if factor < 1:
            raise ValueError("refinement factor must be >= 1")
        if factor == 1:
            return self
        frac = np.arange(factor) / factor
        inner = (self.left[:, None] + frac[None, :] * self.steps[:, None]).ravel()
        return TimeGrid(np.append(inner, self.T))

    def is_refinement_of(self, coarse: "TimeGrid", rtol: float = 1e-12) -> bool:
        if abs(self.T - coarse.T) > rtol * max(1.0, self.T):
            return False
        idx = np.searchsorted(self.nodes, coarse.nodes)
        idx = np.clip(idx, 0, self.nodes.size - 1)
        lo = np.clip(idx - 1, 0, None)
        gap = np.minimum(np.abs(self.nodes[idx] - coarse.nodes), np.abs(self.nodes[lo] - coarse.nodes))
        return bool(np.all(gap <= rtol * max(1.0, self.T)))

    def interval_of(self, times: np.ndarray) -> np.ndarray:
        """Index ``i`` with ``t in [t_i, t_{i+1})`` (last interval closed)."""
        tol = 1e-12 * max(1.0, self.T)
        idx = np.searchsorted(self.nodes, np.asarray(times) + tol, side="right") - 1
        return np.clip(idx, 0, self.n - 1)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())

    def __repr__(self):
        return f"TimeGrid(n={self.n}, T={self.T:g}, mesh={self.mesh:.4g})"


class TimeFunction:
    """Matrix-valued function of time, sampled in batches."""

    shape: tuple[int, int]

    def sample(self, times: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t: float) -> np.ndarray:
        return self.sample(np.array([t], dtype=float))[0]


class Constant(TimeFunction):
    def __init__(self, value):
        value = np.atleast_2d(np.asarray(value, dtype=float))
        if value.ndim != 2:
            raise ValueError("constant coefficient must be a matrix")
        self.value = value
        self.shape = value.shape

    def sample(self, times):
        return np.broadcast_to(self.value, (len(times),) + self.shape)

    def __repr__(self):
        return f"Constant({self.value.tolist()})"


class Function(TimeFunction):
    """Wraps ``fn(t) -> matrix``; set ``vectorized`` if ``fn`` maps an array of times to a stack."""

    def __init__(self, fn: Callable, shape: tuple[int, int] | None = None, vectorized: bool = False, name: str | None = None):
        self.fn = fn
        self.vectorized = vectorized
        self.name = name
        if shape is None:
            shape = np.atleast_2d(np.asarray(fn(np.array([0.0]))[0] if vectorized else fn(0.0))).shape
        self.shape = tuple(shape)

    def sample(self, times):
        times = np.asarray(times, dtype=float)
        if self.vectorized:
            out = np.asarray(self.fn(times), dtype=float)
        else:
            out = np.array([np.atleast_2d(np.asarray(self.fn(float(t)), dtype=float)) for t in times])
        return out.reshape((len(times),) + self.shape)

    def __repr__(self):
        return f"Function({self.name or self.fn!r})"


Coefficient = Union[TimeFunction, np.ndarray, Sequence, float, Callable]


def as_time_function(c: Coefficient) -> TimeFunction:
    if isinstance(c, TimeFunction):
        return c
    if callable(c):
        return Function(c)
    return Constant(c)


@dataclass(frozen=True)
class Coefficients:
    """Coefficients stacked over a vector of times; channel axis is axis 1 for C and D."""

    times: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    Vbar: np.ndarray
    Vbar_inv: np.ndarray
    logdet_Vbar: np.ndarray


# ---------------------------------------------------------------------------
# the control problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LqcModel:
    """Entropy-regularized stochastic LQ problem with ``p`` noise channels.

    ``C`` and ``D`` are sequences of length ``p``; channel ``j`` contributes
    ``(C_j x + D_j a) dW_j`` to the state.  ``Sigma0`` is ``E[xi0 xi0^T]``;
    ``xi0_mean``/``xi0_cov`` are only needed for simulation.
    """

    d: int
    k: int
    T: float
    A: TimeFunction
    B: TimeFunction
    C: tuple
    D: tuple
    Q: TimeFunction
    S: TimeFunction
    R: TimeFunction
    G: np.ndarray
    rho: float
    Vbar: TimeFunction
    Sigma0: np.ndarray
    xi0_mean: np.ndarray | None = None
    xi0_cov: np.ndarray | None = None
    name: str = "custom"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(
        cls,
        *,
        A: Coefficient,
        B: Coefficient,
        C: Sequence[Coefficient] | Coefficient,
        D: Sequence[Coefficient] | Coefficient,
        Q: Coefficient,
        S: Coefficient,
        R: Coefficient,
        G,
        rho: float,
        Vbar: Coefficient,
        T: float = 1.0,
        Sigma0=None,
        xi0_mean=None,
        xi0_cov=None,
        name: str = "custom",
    ) -> "LqcModel":
        """Normalise coefficient inputs and check dimensions.

        ``C``/``D`` may be a single coefficient (one channel) or a list.
        Provide either ``Sigma0`` or the pair ``xi0_mean``/``xi0_cov``.
        """
        A_, B_, Q_, S_, R_, Vbar_ = (as_time_function(c) for c in (A, B, Q, S, R, Vbar))
        C_ = _channels(C)
        D_ = _channels(D)
        d, k = B_.shape
        G = _ingest_sym(np.atleast_2d(np.asarray(G, dtype=float)), "G")
        if xi0_mean is not None:
            xi0_mean = np.atleast_1d(np.asarray(xi0_mean, dtype=float))
            xi0_cov = _ingest_sym(np.atleast_2d(np.asarray(xi0_cov, dtype=float)), "xi0_cov")
            if Sigma0 is None:
                Sigma0 = xi0_cov + np.outer(xi0_mean, xi0_mean)
        if Sigma0 is None:
            raise ValueError("Sigma0 (or xi0_mean/xi0_cov) is required")
        Sigma0 = _ingest_sym(np.atleast_2d(np.asarray(Sigma0, dtype=float)), "Sigma0")
        model = cls(
            d=d, k=k, T=float(T), A=A_, B=B_, C=C_, D=D_, Q=Q_, S=S_, R=R_, G=G,
            rho=float(rho), Vbar=Vbar_, Sigma0=Sigma0, xi0_mean=xi0_mean, xi0_cov=xi0_cov, name=name,
        )
        model.check_dimensions()
        return model

    @property
    def p(self) -> int:
        return len(self.C)

    def check_dimensions(self) -> None:
        d, k = self.d, self.k
        expected = {"A": (d, d), "B": (d, k), "Q": (d, d), "S": (k, d), "R": (k, k), "Vbar": (k, k)}
        for key, shape in expected.items():
            got = tuple(getattr(self, key).shape)
            if got != shape:
                raise ValueError(f"dimension mismatch for {key}: expected {shape}, got {got}")
        if len(self.C) != len(self.D) or len(self.C) == 0:
            raise ValueError("C and D need the same (positive) number of noise channels")
        for j, (c, dd) in enumerate(zip(self.C, self.D)):
            if tuple(c.shape) != (d, d):
                raise ValueError(f"dimension mismatch for C[{j}]: expected {(d, d)}, got {tuple(c.shape)}")
            if tuple(dd.shape) != (d, k):
                raise ValueError(f"dimension mismatch for D[{j}]: expected {(d, k)}, got {tuple(dd.shape)}")
        for key, M in (("G", self.G), ("Sigma0", self.Sigma0)):
            if M.shape != (d, d):
                raise ValueError(f"dimension mismatch for {key}: expected {(d, d)}, got {M.shape}")
        if self.xi0_mean is not None and (self.xi0_mean.shape != (d,) or self.xi0_cov.shape != (d, d)):
            raise ValueError("dimension mismatch for xi0_mean/xi0_cov")

    def coefficients(self, times: np.ndarray) -> Coefficients:
        """Sample every coefficient at ``times`` (cached per distinct time vector)."""
        times = np.asarray(times, dtype=float)
        key = times.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        n = times.size
        Q = _sample_sym(self.Q, times, "Q")
        R = _sample_sym(self.R, times, "R")
        Vbar = _sample_sym(self.Vbar, times, "Vbar")
        w, U = np.linalg.eigh(Vbar)
        if np.any(w <= 0):
            Vbar_inv = np.full_like(Vbar, np.nan)
            logdet = np.full(n, np.nan)
        else:
            Vbar_inv = sym((U / w[:, None, :]) @ np.swapaxes(U, -1, -2))
            logdet = np.log(w).sum(axis=1)
        coef = Coefficients(
            times=times,
            A=np.array(self.A.sample(times)),
            B=np.array(self.B.sample(times)),
            C=np.stack([c.sample(times) for c in self.C], axis=1),
            D=np.stack([dd.sample(times) for dd in self.D], axis=1),
            Q=Q, S=np.array(self.S.sample(times)), R=R, Vbar=Vbar, Vbar_inv=Vbar_inv, logdet_Vbar=logdet,
        )
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = coef
        return coef

    def replace(self, **changes) -> "LqcModel":
        """Copy with some fields swapped; inputs are normalised as in :meth:`build`."""
        keys = ("A", "B", "C", "D", "Q", "S", "R", "G", "rho", "Vbar", "T", "Sigma0", "xi0_mean", "xi0_cov", "name")
        unknown = set(changes) - set(keys)
        if unknown:
            raise TypeError(f"cannot replace {sorted(unknown)}")
        data = {f: getattr(self, f) for f in keys}
        data.update(changes)
        return LqcModel.build(**data)


def _channels(c) -> tuple:
    if isinstance(c, (list, tuple)) and len(c) > 0 and not np.isscalar(c[0]) and (
        isinstance(c[0], TimeFunction) or callable(c[0]) or np.asarray(c[0]).ndim == 2
    ):
        return tuple(as_time_function(x) for x in c)
    return (as_time_function(c),)


def _ingest_sym(M: np.ndarray, name: str) -> np.ndarray:
    asym = float(np.max(np.abs(M - M.T), initial=0.0)) if M.ndim == 2 else 0.0
    if asym > SYM_WARN_TOL:
        warnings.warn(f"{name} is not symmetric (max asymmetry {asym:.2e}); symmetrizing", stacklevel=3)
    return sym(M)


def _sample_sym(fn: TimeFunction, times: np.ndarray, name: str) -> np.ndarray:
    M = np.array(fn.sample(times), dtype=float)
    asym = float(np.max(np.abs(M - np.swapaxes(M, -1, -2)), initial=0.0))
    if asym > SYM_WARN_TOL:
        warnings.warn(f"{name} is not symmetric (max asymmetry {asym:.2e}); symmetrizing", stacklevel=3)
    return sym(M)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...]
    delta: float  # uniform lower eigenvalue margin of Vbar on the grid

    def __str__(self):
        if self.ok:
            return f"ok (Vbar margin {self.delta:.4g})"
        return "violations: " + "; ".join(self.violations)


def validate_model(model: LqcModel, grid: TimeGrid, tol: float = 1e-8) -> ValidationReport:
    """Check the standing assumptions on ``grid``.

    Dimension problems raise; assumption violations are listed in the report.
    """
    model.check_dimensions()
    if abs(grid.T - model.T) > 1e-12 * max(1.0, model.T):
        raise ValueError(f"grid horizon {grid.T} does not match model horizon {model.T}")
    violations = []
    if not model.rho > 0:
        violations.append("rho must be positive")
    times = grid.nodes
    raw = {name: np.asarray(getattr(model, name).sample(times)) for name in ("Q", "R", "Vbar")}
    raw["G"] = model.G[None]
    for name, M in raw.items():
        asym = float(np.max(np.abs(M - np.swapaxes(M, -1, -2)), initial=0.0))
        if asym > tol:
            violations.append(f"{name} not symmetric (asymmetry {asym:.2e})")
    vbar_eigs = np.linalg.eigvalsh(sym(raw["Vbar"]))
    delta = float(vbar_eigs.min())
    if delta <= tol:
        violations.append("Vbar not uniformly positive definite")
    if np.linalg.eigvalsh(model.Sigma0).min() < -tol:
        violations.append("Sigma0 not positive semidefinite")
    return ValidationReport(ok=not violations, violations=tuple(violations), delta=delta)


# ---------------------------------------------------------------------------
# policies and solver output
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Policy:
    """Gaussian feedback policy ``N(K_i x, V_i)`` on each interval of ``grid``.

    With ``validate=False`` a policy whose covariances left the PD cone can
    still be built; check :attr:`in_theta` before using it.
    """

    grid: TimeGrid
    K: np.ndarray
    V: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        K = np.array(self.K, dtype=float)
        V = np.array(self.V, dtype=float)
        n = self.grid.n
        if K.ndim == 2:
            K = np.broadcast_to(K, (n,) + K.shape).copy()
        if V.ndim == 2:
            V = np.broadcast_to(V, (n,) + V.shape).copy()
        if K.shape[0] != n or V.shape[0] != n:
            raise ValueError(f"policy needs {n} interval values, got K {K.shape}, V {V.shape}")
        if V.shape[1:] != (K.shape[1], K.shape[1]):
            raise ValueError(f"V must be k x k with k={K.shape[1]}, got {V.shape[1:]}")
        V = sym(V)
        K.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "V", V)
        w = np.linalg.eigvalsh(V)
        eps = float(min(w.min(), 1.0 / w.max())) if w.min() > 0 else float(w.min())
        object.__setattr__(self, "eps", eps)
        if self.validate and not eps > 0:
            raise ValueError(f"policy covariance is not positive definite (min eigenvalue {w.min():.3e})")

    @property
    def in_theta(self) -> bool:
        return self.eps > 0

    @property
    def k(self) -> int:
        return self.K.shape[1]

    @property
    def d(self) -> int:
        return self.K.shape[2]

    def on(self, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
        """Values of ``(K, V)`` on every interval of a refining ``grid``."""
        if grid == self.grid:
            return self.K, self.V
        if not grid.is_refinement_of(self.grid):
            raise ValueError(f"{grid} does not refine the policy grid {self.grid}")
        idx = self.grid.interval_of(grid.left)
        return self.K[idx], self.V[idx]

    def k_l2(self) -> float:
        return float(np.sqrt(np.sum(self.grid.steps * np.sum(self.K**2, axis=(1, 2)))))

    def with_values(self, K=None, V=None, validate: bool = False) -> "Policy":
        return Policy(self.grid, self.K if K is None else K, self.V if V is None else V, validate=validate)


@dataclass(frozen=True)
class TrajectorySolution:
    """``P``, ``Sigma`` and ``phi`` at the nodes of the solver grid."""

    grid: TimeGrid
    P: np.ndarray
    Sigma: np.ndarray
    phi: np.ndarray

    def to_csv(self, path) -> None:
        d = self.P.shape[-1]
        header = ["t"] + [f"P_{i}{j}" for i in range(d) for j in range(d)]
        header += [f"Sigma_{i}{j}" for i in range(d) for j in range(d)] + ["phi"]
        rows = np.column_stack(
            [self.grid.nodes, self.P.reshape(len(self.P), -1), self.Sigma.reshape(len(self.Sigma), -1), self.phi]
        )
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


@dataclass(frozen=True)
class DiagnosticsRecord:
    iteration: int
    cost: float
    k_l2: float
    v_eig_min: float
    v_eig_max: float
    sigma_eig_min: float
    sigma_eig_max: float
    p_monotone: bool  # P^{n-1} >= P^n (True at n = 0)
    p_above_opt: bool  # P^n >= P*
    lambda0_bar: float
    delta_tilde: float
    v_in_envelope: bool = True
    k_in_bound: bool = True
