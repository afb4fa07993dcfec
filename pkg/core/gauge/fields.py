from functools import partial
from typing import Dict, Optional, Tuple

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.common import complexify, nonuniform_derivative, tail_integral
from core.diagnostics.fitting import log_log_slope
from core.errors import FitError, TailError
from core.gauge.frame import Frame, heat_velocity
from core.heatflow.heat import HeatTrajectory
from core.spectral.grid import Grid2
from core.targets.target import TargetManifold

# the curvature integrand at s_max must be this small relative to its peak
TAIL_RATIO = 1e-10


@chex.dataclass(frozen=True)
class GaugeData:
    """Caloric-gauge fields along a heat trajectory, in realified frame components.
    - `grid`: spatial grid
    - `target`: target manifold
    - `s_levels`: heat times, shape (L,)
    - `states`: v per level, shape (L, n, n, N)
    - `frames`: caloric frames, shape (L, n, n, 2n, N)
    - `psi`: psi_i^p = <d_i v, e_p>, shape (L, n, n, 2, 2n)
    - `psi_s`: psi_s^p = <d_s v, e_p>, shape (L, n, n, 2n)
    - `A`: A_i[p, q] = <nabla_i e_p, e_q> from frame derivatives, antisymmetrised, shape (L, n, n, 2, 2n, 2n)
    - `antisymmetry_defect`: max |A + A^T| before antisymmetrisation
    - `A_integral`: (optional) A_i from the curvature integral over s, same shape as `A`
    - `A_integral_tail`: truncation-tail estimate of the integral (0 when absent)
    """
    grid: Grid2
    target: TargetManifold
    s_levels: chex.Array
    states: chex.Array
    frames: chex.Array
    psi: chex.Array
    psi_s: chex.Array
    A: chex.Array
    antisymmetry_defect: float
    A_integral: Optional[chex.Array] = None
    A_integral_tail: float = 0.0

    @property
    def phi(self) -> chex.Array:
        """phi_i^b = psi_i^(2b-1) + i psi_i^(2b), shape (L, n, n, 2, n)"""
        return complexify(self.psi)

    @property
    def phi_s(self) -> chex.Array:
        return complexify(self.psi_s)


def level_gradient(grid: Grid2, f: chex.Array) -> chex.Array:
    """spatial gradient of a level-indexed field (L, n, n, ...), stacked as (L, n, n, 2, ...)"""
    d1, d2 = jax.vmap(grid.gradient)(f)
    return jnp.stack([d1, d2], axis=3)


def covariant_derivative(grid: Grid2, A_i: chex.Array, w: chex.Array, axis: int) -> chex.Array:
    """D_i w = d_i w + A_i^T w on realified components: (D_i w)^q = d_i w^q + sum_p A_i[p, q] w^p.

    Args:
    - `grid`: spatial grid
    - `A_i`: connection along axis i, shape (L, n, n, 2n, 2n)
    - `w`: component field, shape (L, n, n, 2n)
    - `axis`: 0 or 1

    Returns:
    - (chex.Array): shape of `w`
    """
    d = jax.vmap(lambda f: grid.derivative(f, axis))(w)
    return d + jnp.einsum('...pq,...p->...q', A_i, w)


@partial(jax.jit, static_argnums=(0,))
def _differential_fields(grid: Grid2, states: chex.Array, frames: chex.Array) -> chex.Array:
    dv = level_gradient(grid, states)
    return jnp.einsum('lxyic,lxypc->lxyip', dv, frames)


def differential_fields(traj: HeatTrajectory, frame: Frame) -> chex.Array:
    """psi_i^p = <d_i v, e_p> per level, shape (L, n, n, 2, 2n); `complexify` gives phi_i."""
    return _differential_fields(traj.grid, traj.states, frame.vectors)


@partial(jax.jit, static_argnums=(0, 1))
def _heat_tension(grid: Grid2, target: TargetManifold, states: chex.Array, frames: chex.Array) -> chex.Array:
    tau = heat_velocity(grid, target, states)
    return jnp.einsum('lxyc,lxypc->lxyp', tau, frames)


def heat_tension(traj: HeatTrajectory, frame: Frame) -> chex.Array:
    """psi_s^p = <d_s v, e_p> with d_s v = tau(v) from the flow equation, shape (L, n, n, 2n)."""
    return _heat_tension(traj.grid, traj.target, traj.states, frame.vectors)


def s_derivative(values: chex.Array, s: chex.Array) -> chex.Array:
    """Second-order finite differences along the level axis on a nonuniform grid
    (one-sided at the ends)."""
    return nonuniform_derivative(values, s)


def heat_velocity_defect(traj: HeatTrajectory) -> chex.Array:
    """Per level, sup_x |finite-difference d_s v - tau(v)| (two independent routes to d_s v)."""
    fd = s_derivative(traj.states, traj.s_levels)
    tau = heat_velocity(traj.grid, traj.target, traj.states)
    return jnp.max(jnp.abs(fd - tau), axis=(1, 2, 3))


@partial(jax.jit, static_argnums=(0,))
def _connection_direct(grid: Grid2, frames: chex.Array) -> Tuple[chex.Array, chex.Array]:
    de = level_gradient(grid, frames)
    A = jnp.einsum('lxyipc,lxyqc->lxyipq', de, frames)
    defect = jnp.max(jnp.abs(A + jnp.swapaxes(A, -1, -2)))
    return 0.5 * (A - jnp.swapaxes(A, -1, -2)), defect


def connection_direct(traj: HeatTrajectory, frame: Frame) -> Tuple[chex.Array, float]:
    """A_i[p, q] = <d_i e_p, e_q> from spectral derivatives of the frames.

    Returns:
    - (chex.Array, float): antisymmetrised connection of shape (L, n, n, 2, 2n, 2n), raw antisymmetry defect
    """
    A, defect = _connection_direct(traj.grid, frame.vectors)
    return A, float(defect)


@partial(jax.jit, static_argnums=(0,))
def curvature_integrand(target: TargetManifold, states: chex.Array, velocity: chex.Array,
                        direction: chex.Array, frames: chex.Array) -> chex.Array:
    """<R(velocity, direction) e_p, e_q> per point, shape (..., 2n, 2n)"""
    X = velocity[..., None, :]
    Y = direction[..., None, :]
    R_e = target.curvature(states[..., None, :], X, Y, frames)
    return jnp.einsum('...pc,...qc->...pq', R_e, frames)


def integrate_from_top(integrand: chex.Array, s_levels: chex.Array) -> Tuple[chex.Array, float]:
    """-int_s^{s_max} integrand ds per level, with a tail estimate for the truncated part beyond s_max.

    Raises a TailError when the integrand at s_max is not negligible against its peak.
    """
    magnitude = np.asarray(jnp.max(jnp.abs(integrand.reshape(integrand.shape[0], -1)), axis=1))
    peak = float(magnitude.max())
    if peak > 0 and magnitude[-1] > TAIL_RATIO * peak:
        raise TailError(f"curvature integrand at s_max is {magnitude[-1] / peak:.3e} of its peak; increase s_max")
    tail = 0.0
    if magnitude[-1] > 0:
        ratio = min(magnitude[-1] / max(magnitude[-2], 1e-300), 0.99)
        tail = float(magnitude[-1] * (s_levels[-1] - s_levels[-2]) / (1.0 - ratio))
    return -tail_integral(integrand, s_levels), tail


def connection_integral(traj: HeatTrajectory, frame: Frame) -> Tuple[chex.Array, float]:
    """A_i[p, q](s) = -int_s^inf <R(d_s v, d_i v) e_p, e_q> ds', local cubic quadrature on the level grid.

    Returns:
    - (chex.Array, float): connection of shape (L, n, n, 2, 2n, 2n), truncation-tail estimate
    """
    velocity = heat_velocity(traj.grid, traj.target, traj.states)
    dv = level_gradient(traj.grid, traj.states)
    integrand = jnp.stack([
        curvature_integrand(traj.target, traj.states, velocity, dv[:, :, :, i], frame.vectors)
        for i in range(2)
    ], axis=3)
    return integrate_from_top(integrand, traj.s_levels)


def build_gauge(traj: HeatTrajectory, frame: Frame, with_integral: bool = True) -> GaugeData:
    """Differential fields, heat tension and both connection routes for a trajectory and its frames."""
    A, defect = connection_direct(traj, frame)
    A_integral, tail = connection_integral(traj, frame) if with_integral else (None, 0.0)
    return GaugeData(
        grid=traj.grid,
        target=traj.target,
        s_levels=traj.s_levels,
        states=traj.states,
        frames=frame.vectors,
        psi=differential_fields(traj, frame),
        psi_s=heat_tension(traj, frame),
        A=A,
        antisymmetry_defect=defect,
        A_integral=A_integral,
        A_integral_tail=tail,
    )


def connection_agreement(gauge: GaugeData) -> float:
    """max |A_direct - A_integral| over levels, points and indices"""
    if gauge.A_integral is None:
        raise TailError("gauge was built without the integral connection")
    return float(jnp.max(jnp.abs(gauge.A - gauge.A_integral)))


@chex.dataclass(frozen=True)
class GaugeDecayProfile:
    """Parabolic decay profile of gauge fields per level (columns i = 1, 2).
    - `s_levels`: heat times
    - `phi_l2`: ||phi_i||_{L^2}
    - `phi_sup`: s^(1/2) ||phi_i||_{L^inf}
    - `A_l2`: ||A_i||_{L^2} (Frobenius norm pointwise)
    - `A_sup`: s^(1/2) ||A_i||_{L^inf}
    - `slopes`: fitted log-log slopes of the four series over the window, nan where unavailable
    """
    s_levels: np.ndarray
    phi_l2: np.ndarray
    phi_sup: np.ndarray
    A_l2: np.ndarray
    A_sup: np.ndarray
    slopes: Dict[str, float]


def gauge_decay_profile(gauge: GaugeData, window: Optional[Tuple[float, float]] = None) -> GaugeDecayProfile:
    """Lebesgue-space decay profile of phi_i and A_i along s."""
    area = gauge.grid.cell_area
    s = np.asarray(gauge.s_levels)
    phi_mag = jnp.linalg.norm(gauge.psi, axis=-1)
    A_mag = jnp.linalg.norm(gauge.A, axis=(-2, -1))
    series = {
        'phi_l2': np.asarray(jnp.sqrt(jnp.sum(phi_mag ** 2, axis=(1, 2)) * area)),
        'phi_sup': np.sqrt(s)[:, None] * np.asarray(jnp.max(phi_mag, axis=(1, 2))),
        'A_l2': np.asarray(jnp.sqrt(jnp.sum(A_mag ** 2, axis=(1, 2)) * area)),
        'A_sup': np.sqrt(s)[:, None] * np.asarray(jnp.max(A_mag, axis=(1, 2))),
    }
    if window is None:
        cutoff = 2.0 / 3.0 * gauge.grid.nyquist
        window = (16.0 / cutoff ** 2, 0.25 / gauge.grid.xi_min ** 2)
    inside = (s >= window[0]) & (s <= window[1])
    slopes = {}
    for name, values in series.items():
        y = values.sum(axis=1)
        usable = inside & (y > 0)
        try:
            slopes[name] = log_log_slope(s[usable], y[usable]).slope if usable.sum() >= 5 else float('nan')
        except (FitError, ValueError, np.linalg.LinAlgError):
            slopes[name] = float('nan')
    return GaugeDecayProfile(s_levels=s, slopes=slopes, **series)
