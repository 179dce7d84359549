"""Registered benchmark problems and named time-varying coefficients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Function, LqcModel, Policy, TimeGrid, psd_sqrt

# Gram matrix of the three action-noise channels in the mean-variance problem
MV_DTD = np.array(
    [
        [0.5, 0.25, -0.125],
        [0.25, 1.0, -0.25],
        [-0.125, -0.25, 0.5],
    ]
)
MV_B_BASE = np.array([0.4, 0.8, 0.4])


def sinusoidal_B(t, base=MV_B_BASE, amplitude: float = 0.2):
    """``B_t = base + amplitude sin(2 pi t) 1`` as a stack of 1 x k rows."""
    t = np.asarray(t, dtype=float)
    return (base[None, :] + amplitude * np.sin(2 * np.pi * t)[:, None])[:, None, :]


# name -> factory(params) -> TimeFunction
COEFFICIENT_REGISTRY = {
    "sinusoidal_B": lambda base=tuple(MV_B_BASE), amplitude=0.2: Function(
        lambda t: sinusoidal_B(t, np.asarray(base, dtype=float), amplitude),
        shape=(1, len(base)),
        vectorized=True,
        name="sinusoidal_B",
    ),
}


def channels_from_gram(gram: np.ndarray) -> list[np.ndarray]:
    """Split a Gram matrix ``D^T D`` into channels: rows of its symmetric square root."""
    root = psd_sqrt(gram)
    return [root[j : j + 1, :] for j in range(root.shape[0])]


def mean_variance_model(
    mu: float = 0.5,
    rho: float = 0.01,
    vbar_scale: float = 0.1,
    xi0_mean: float = 0.5,
    xi0_var: float = 0.01,
    T: float = 1.0,
    dtd: np.ndarray = MV_DTD,
    b_base=MV_B_BASE,
    b_amplitude: float = 0.2,
) -> LqcModel:
    """One-dimensional mean-variance problem with three correlated noise channels.

    The state has no drift of its own, only controlled drift ``B_t a`` and
    controlled noise; the terminal weight is ``G = mu``.
    """
    dtd = np.asarray(dtd, dtype=float)
    k = dtd.shape[0]
    D = channels_from_gram(dtd)
    return LqcModel.build(
        A=np.zeros((1, 1)),
        B=COEFFICIENT_REGISTRY["sinusoidal_B"](base=tuple(np.asarray(b_base, dtype=float)), amplitude=b_amplitude),
        C=[np.zeros((1, 1))] * k,
        D=D,
        Q=np.zeros((1, 1)),
        S=np.zeros((k, 1)),
        R=np.zeros((k, k)),
        G=np.array([[mu]]),
        rho=rho,
        Vbar=vbar_scale * np.eye(k),
        T=T,
        xi0_mean=[xi0_mean],
        xi0_cov=[[xi0_var]],
        name="mean-variance",
    )


def mean_variance_theta0(grid: TimeGrid, dtd: np.ndarray = MV_DTD) -> Policy:
    """Initial policy ``K = (1/3, 1/3, 1/3)^T``, ``V = 0.1 D^T D`` on every interval."""
    k = np.asarray(dtd).shape[0]
    return Policy(grid, np.full((k, 1), 1.0 / 3.0), 0.1 * np.asarray(dtd, dtype=float))


@dataclass(frozen=True)
class BenchmarkPreset:
    name: str
    model: LqcModel
    base_grid_n: int = 128
    tau_scaled: float = 0.01
    tau_unscaled: float = 0.08
    mesh_family: tuple[int, ...] = (8, 16, 32, 64, 128)
    epsilon: float = 0.01
    num_paths: int = 100_000
    sim_steps: int = 128
    iterations: int = 1000
    tail: int = 50
    repetitions: int = 10
    seeds: tuple[int, ...] = field(default_factory=lambda: tuple(range(10)))

    def theta0(self, grid: TimeGrid) -> Policy:
        return mean_variance_theta0(grid)

    def base_grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.model.T, self.base_grid_n)


PRESETS = {"mean-variance": lambda: BenchmarkPreset(name="mean-variance", model=mean_variance_model())}


def get_preset(name: str) -> BenchmarkPreset:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
