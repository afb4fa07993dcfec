import jax
import jax.numpy as jnp
import numpy as np

from core.cli.config import InitialDataConfig
from core.errors import CutLocusError, InitialDataError
from core.slflow.schrodinger import helix_solution
from core.spectral.grid import Grid2
from core.targets.sphere import Sphere2
from core.targets.target import TargetManifold
from core.types import MapField


def bump_profile(grid: Grid2, center, width: float) -> np.ndarray:
    """Smooth compactly supported bump exp(1 - 1/(1 - r^2)), r = |x - center| / width, with peak 1."""
    x1, x2 = grid.mesh
    r2 = ((x1 - center[0]) ** 2 + (x2 - center[1]) ** 2) / width ** 2
    inside = r2 < 1.0
    out = np.zeros_like(r2)
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return out


def tangent_bump(grid: Grid2, target: TargetManifold, amplitude: float, width: float, center) -> jnp.ndarray:
    """amplitude * bump(x) * e_1, a tangent field at Q along the first reference vector"""
    direction = np.asarray(target.reference_frame[0])
    return jnp.asarray(amplitude * bump_profile(grid, center, width)[..., None] * direction)


def _random_multiplier(grid: Grid2, spec: InitialDataConfig) -> np.ndarray:
    xi = grid.xi_norm
    if spec.spectrum == 'gaussian':
        multiplier = np.exp(-0.5 * (xi * spec.smoothing) ** 2)
    else:
        lo, hi = spec.band if spec.band is not None else (grid.xi_min, 2.0 / 3.0 * grid.nyquist)
        band = (xi >= lo) & (xi <= hi)
        # |u_hat| ~ |xi|^-2: equal energy in every dyadic shell of the band
        multiplier = np.where(band, 1.0 / np.maximum(xi, grid.xi_min) ** 2, 0.0)
    multiplier[0, 0] = 0.0
    return multiplier


def random_tangent(grid: Grid2, target: TargetManifold, spec: InitialDataConfig) -> jnp.ndarray:
    """Seeded filtered noise projected to T_Q, scaled so that ||d X||_{L^2} = amplitude."""
    key = jax.random.PRNGKey(spec.seed)
    noise = jax.random.normal(key, grid.shape + (target.ambient_dim,), dtype=jnp.float64)
    filtered = grid.apply_multiplier(noise, jnp.asarray(_random_multiplier(grid, spec)))
    Q = jnp.asarray(target.base_point)
    X = target.project_tangent(Q, filtered)
    norm = float(grid.derivative_norm(X, 1))
    return X * (spec.amplitude / norm) if norm > 0 else jnp.zeros_like(X)


def initial_data(spec: InitialDataConfig, grid: Grid2, target: TargetManifold) -> MapField:
    """Initial map for a named family.

    `bump` and `random` build a tangent field X at Q and return exp_Q(X); `helix` is the precessing
    helix at t = 0 (S^2 only).

    Args:
    - `spec`: initial-data section of the run config
    - `grid`: spatial grid
    - `target`: target manifold

    Returns:
    - (MapField): constraint-satisfying initial map
    """
    if spec.family == 'helix':
        if not isinstance(target, Sphere2) or target.n_blocks != 1:
            raise InitialDataError(f"the helix family exists on sphere2 only, not {target.name}")
        return helix_solution(grid, spec.theta, spec.mode)
    if spec.family == 'bump':
        X = tangent_bump(grid, target, spec.amplitude, spec.width, spec.center)
    elif spec.family == 'random':
        X = random_tangent(grid, target, spec)
    else:
        raise InitialDataError(f"unknown initial-data family '{spec.family}'")
    Q = jnp.asarray(target.base_point)
    try:
        values = target.exp_map(Q, X)
    except CutLocusError as err:
        raise InitialDataError(f"{spec.family} data with amplitude {spec.amplitude} crosses the cut locus") from err
    return MapField(grid=grid, target=target, values=jnp.broadcast_to(values, grid.shape + (target.ambient_dim,)))


def gradient_norm(u: MapField) -> float:
    """||du||_{L^2}"""
    return float(u.grid.derivative_norm(u.values, 1))
