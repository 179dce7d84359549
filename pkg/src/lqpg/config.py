"""JSON run configs: preset expansion, overrides, validation and hashing.

A config file is a JSON object.  ``preset`` names a registered benchmark;
every other key is optional and overrides the preset default.  Model
parameters live under ``model``.  ``load_config`` returns a fully resolved
:class:`RunSpec`; ``emit_config`` writes it back in canonical form, so
emit -> load -> emit is the identity on bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .model import LqcModel, TimeGrid
from .presets import MV_B_BASE, MV_DTD, PRESETS, BenchmarkPreset, mean_variance_model

MODES = ("model-based", "model-free")
OPTIMUM_PROTOCOLS = ("tail", "converged")


class ConfigError(ValueError):
    """Raised for unknown, missing or malformed configuration entries."""


@dataclass(frozen=True)
class ModelParams:
    mu: float = 0.5
    rho: float = 0.01
    vbar_scale: float = 0.1
    xi0_mean: float = 0.5
    xi0_var: float = 0.01
    T: float = 1.0
    dtd: tuple = tuple(map(tuple, MV_DTD.tolist()))
    b_base: tuple = tuple(MV_B_BASE.tolist())
    b_amplitude: float = 0.2


@dataclass(frozen=True)
class RunSpec:
    """Everything that affects the numbers a run produces."""

    preset: str
    model: ModelParams
    grid: int = 128
    method: str = "euler"
    tau: float = 0.01
    tau_unscaled: float = 0.08
    epsilon: float = 0.01
    iterations: int = 1000
    unscaled_budget: int = 8000
    tail: int = 50
    optimum: str = "converged"
    mesh_family: tuple = (8, 16, 32, 64, 128)
    mode: str = "model-based"
    num_paths: int = 100_000
    sim_steps: int = 128
    mf_iterations: int = 300
    repetitions: int = 10
    seeds: tuple = tuple(range(10))

    def build_model(self) -> LqcModel:
        m = self.model
        return mean_variance_model(
            mu=m.mu,
            rho=m.rho,
            vbar_scale=m.vbar_scale,
            xi0_mean=m.xi0_mean,
            xi0_var=m.xi0_var,
            T=m.T,
            dtd=np.array(m.dtd, dtype=float),
            b_base=np.array(m.b_base, dtype=float),
            b_amplitude=m.b_amplitude,
        )

    def base_grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.model.T, self.grid)

    def mesh_grids(self) -> list[TimeGrid]:
        return [TimeGrid.uniform(self.model.T, n) for n in self.mesh_family]

    def dtd(self) -> np.ndarray:
        return np.array(self.model.dtd, dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        return _jsonable(d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; covers every numeric input."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


_SPEC_KEYS = {f.name for f in fields(RunSpec)}
_MODEL_KEYS = {f.name for f in fields(ModelParams)}
_INT_KEYS = {"grid", "iterations", "unscaled_budget", "tail", "num_paths", "sim_steps", "mf_iterations", "repetitions"}
_FLOAT_KEYS = {"tau", "tau_unscaled", "epsilon"}
_MODEL_FLOATS = _MODEL_KEYS - {"dtd", "b_base"}


def _as_float(key: str, v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {v!r}")
    return float(v)


def _as_int(key: str, v, minimum: int = 1) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key}: expected an integer, got {v!r}")
    if v < minimum:
        raise ConfigError(f"{key}: must be >= {minimum}, got {v}")
    return v


def _as_matrix(key: str, v, shape: tuple[int, ...] | None = None) -> tuple:
    try:
        arr = np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: malformed matrix {v!r}") from None
    if arr.dtype == object or (shape is not None and arr.shape != shape) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key}: expected shape {shape}, got {arr.shape if arr.dtype != object else 'ragged'}")
    return tuple(map(tuple, arr.tolist())) if arr.ndim == 2 else tuple(arr.tolist())


def _model_params(base: ModelParams, raw: dict) -> ModelParams:
    if not isinstance(raw, dict):
        raise ConfigError("model: expected an object")
    unknown = sorted(set(raw) - _MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown model keys: {', '.join('model.' + k for k in unknown)}")
    vals = {}
    for key, v in raw.items():
        if key in _MODEL_FLOATS:
            vals[key] = _as_float(f"model.{key}", v)
    dtd_raw = raw.get("dtd", base.dtd)
    dtd = np.array(_as_matrix("model.dtd", dtd_raw), dtype=float)
    if dtd.ndim != 2 or dtd.shape[0] != dtd.shape[1]:
        raise ConfigError(f"model.dtd: expected a square matrix, got shape {dtd.shape}")
    k = dtd.shape[0]
    if not np.allclose(dtd, dtd.T) or np.linalg.eigvalsh(dtd).min() < -1e-12:
        raise ConfigError("model.dtd: must be symmetric positive semidefinite")
    vals["dtd"] = _as_matrix("model.dtd", dtd_raw, (k, k))
    vals["b_base"] = _as_matrix("model.b_base", raw.get("b_base", base.b_base), (k,))
    out = replace(base, **vals)
    if not out.rho > 0:
        raise ConfigError("model.rho: must be positive")
    if not out.vbar_scale > 0:
        raise ConfigError("model.vbar_scale: must be positive")
    if not out.T > 0:
        raise ConfigError("model.T: must be positive")
    if out.xi0_var < 0:
        raise ConfigError("model.xi0_var: must be nonnegative")
    return out


def _preset_spec(preset: BenchmarkPreset) -> RunSpec:
    return RunSpec(
        preset=preset.name,
        model=ModelParams(),
        grid=preset.base_grid_n,
        tau=preset.tau_scaled,
        tau_unscaled=preset.tau_unscaled,
        epsilon=preset.epsilon,
        iterations=preset.iterations,
        tail=preset.tail,
        mesh_family=tuple(preset.mesh_family),
        num_paths=preset.num_paths,
        sim_steps=preset.sim_steps,
        repetitions=preset.repetitions,
        seeds=tuple(preset.seeds),
    )


def resolve(raw: dict) -> RunSpec:
    """Expand a raw config mapping into a validated :class:`RunSpec`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _SPEC_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    if "preset" not in raw:
        raise ConfigError("missing required key: preset")
    name = raw["preset"]
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; available: {sorted(PRESETS)}")
    spec = _preset_spec(PRESETS[name]())
    vals: dict = {}
    for key, v in raw.items():
        if key in _INT_KEYS:
            vals[key] = _as_int(key, v)
        elif key in _FLOAT_KEYS:
            vals[key] = _as_float(key, v)
            if not vals[key] > 0:
                raise ConfigError(f"{key}: must be positive")
    if "model" in raw:
        vals["model"] = _model_params(spec.model, raw["model"])
    if "method" in raw:
        if raw["method"] not in ("euler", "rk4"):
            raise ConfigError(f"method: expected 'euler' or 'rk4', got {raw['method']!r}")
        vals["method"] = raw["method"]
    if "mode" in raw:
        if raw["mode"] not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {raw['mode']!r}")
        vals["mode"] = raw["mode"]
    if "optimum" in raw:
        if raw["optimum"] not in OPTIMUM_PROTOCOLS:
            raise ConfigError(f"optimum: expected one of {OPTIMUM_PROTOCOLS}, got {raw['optimum']!r}")
        vals["optimum"] = raw["optimum"]
    if "mesh_family" in raw:
        mf = raw["mesh_family"]
        if not isinstance(mf, list) or not mf:
            raise ConfigError("mesh_family: expected a nonempty list of interval counts")
        vals["mesh_family"] = tuple(_as_int(f"mesh_family[{i}]", n) for i, n in enumerate(mf))
    if "seeds" in raw:
        sd = raw["seeds"]
        if not isinstance(sd, list) or not sd:
            raise ConfigError("seeds: expected a nonempty list of integers")
        vals["seeds"] = tuple(_as_int(f"seeds[{i}]", s, minimum=0) for i, s in enumerate(sd))
    if "preset" in raw:
        vals["preset"] = name
    spec = replace(spec, **vals)
    if "seeds" not in raw and spec.repetitions != len(spec.seeds):
        spec = replace(spec, seeds=tuple(range(spec.repetitions)))
    if len(spec.seeds) < spec.repetitions:
        raise ConfigError(f"seeds: {len(spec.seeds)} given but repetitions = {spec.repetitions}")
    if spec.sim_steps % spec.grid and spec.mode == "model-free":
        raise ConfigError("sim_steps: must be a multiple of grid so policy nodes are simulation nodes")
    return spec


def load_config(path) -> RunSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return resolve(raw)


def emit_config(spec: RunSpec, path=None) -> str:
    """Canonical JSON text of ``spec``; written to ``path`` if given."""
    text = spec.canonical_json()
    if path is not None:
        Path(path).write_text(text)
    return text


def preset_spec(name: str = "mean-variance", **overrides) -> RunSpec:
    """Resolved spec for a preset with keyword overrides (same rules as a file)."""
    return resolve({"preset": name, **overrides})


__all__ = [
    "ConfigError",
    "ModelParams",
    "RunSpec",
    "emit_config",
    "load_config",
    "preset_spec",
    "resolve",
]
