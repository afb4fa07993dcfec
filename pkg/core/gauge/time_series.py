from collections import deque
from typing import Optional, Sequence

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.common import log_metrics
from core.errors import FrameError
from core.gauge.fields import build_gauge, covariant_derivative, curvature_integrand, integrate_from_top
from core.gauge.frame import build_caloric_frame, heat_velocity
from core.heatflow.heat import HarmonicMapHeatFlow, HeatTrajectory
from core.spectral.grid import Grid2
from core.types import MapField

# centred t-differences whose Richardson error estimate exceeds this fraction of sup|d_t v| flag the t-grid
COARSE_RATIO = 1e-3


@chex.dataclass(frozen=True)
class TimeGauge:
    """Caloric gauge of a time series of maps, sampled at s = 0 on the interior times.
    - `grid`: spatial grid
    - `times`: interior times t_1 .. t_{T-2}, shape (T',)
    - `dt`: uniform time step
    - `s_levels`: common heat levels of every per-time trajectory
    - `states`: maps u(t), shape (T', n, n, N)
    - `frames`: caloric frames at s = 0, shape (T', n, n, 2n, N)
    - `psi`: psi_i, shape (T', n, n, 2, 2n)
    - `A`: A_i, shape (T', n, n, 2, 2n, 2n)
    - `psi_t`: <d_t u, e_p> from centred t-differences, shape (T', n, n, 2n)
    - `A_t`: <d_t e_p, e_q> from centred t-differences of the frames, antisymmetrised, shape (T', n, n, 2n, 2n)
    - `A_t_integral`: A_t from -int_s^{s_max} <R(d_s v, d_t v) e_p, e_q> plus its value at s_max
    - `A_t_agreement`: max over times, levels and points of |A_t - A_t_integral|
    - `torsion_residual`: sup |d_t psi_i + A_t^T psi_i - D_i psi_t| per interior time (nan at the two ends)
    - `fd_error`: Richardson estimate of the centred-difference error in d_t u (nan when T < 5)
    - `t_grid_coarse`: whether `fd_error` dominates (flagged, not fatal)
    """
    grid: Grid2
    times: np.ndarray
    dt: float
    s_levels: np.ndarray
    states: chex.Array
    frames: chex.Array
    psi: chex.Array
    A: chex.Array
    psi_t: chex.Array
    A_t: chex.Array
    A_t_integral: chex.Array
    A_t_agreement: float
    torsion_residual: np.ndarray
    fd_error: float
    t_grid_coarse: bool


@jax.jit
def _frame_time_connection(frames_before: chex.Array, frames: chex.Array, frames_after: chex.Array,
                           dt: chex.Array) -> chex.Array:
    de = (frames_after - frames_before) / (2.0 * dt)
    A = jnp.einsum('...pc,...qc->...pq', de, frames)
    return 0.5 * (A - jnp.swapaxes(A, -1, -2))


def _time_integral(traj: HeatTrajectory, frames: chex.Array, dt_v: chex.Array, A_t_top: chex.Array) -> chex.Array:
    """A_t per level: its value at s_max minus the curvature integral from s to s_max."""
    velocity = heat_velocity(traj.grid, traj.target, traj.states)
    integrand = curvature_integrand(traj.target, traj.states, velocity, dt_v, frames)
    integral, _ = integrate_from_top(integrand, traj.s_levels)
    return integral + A_t_top[None]


def gauge_for_time_series(flow: HarmonicMapHeatFlow, states: Sequence[MapField], dt: float,
                          s_levels: np.ndarray, reference_frame: Optional[np.ndarray] = None,
                          tol_Q: float = 1e-6) -> TimeGauge:
    """Caloric gauge of a uniformly sampled time series u(t_0), ..., u(t_{T-1}).

    Every u(t) is flowed to s_max on the same level grid and gauged with the same reference frame.
    psi_t and A_t come from centred t-differences, so only the interior times carry a gauge.
    Three consecutive per-time gauges are held at once.

    Args:
    - `flow`: heat flow used for every time
    - `states`: maps on a uniform time grid, at least 3
    - `dt`: time step of the series
    - `s_levels`: common heat levels
    - `reference_frame`: (optional) reference frame at Q, defaults to the target's
    - `tol_Q`: convergence tolerance passed to the heat flow

    Returns:
    - (TimeGauge): gauge fields at s = 0 on the interior times
    """
    if len(states) < 3:
        raise FrameError(f"need at least 3 times for centred t-differences, got {len(states)}")
    if not dt > 0:
        raise FrameError(f"time step must be positive, got {dt}")
    s_levels = np.asarray(s_levels, dtype=np.float64)
    dt_arr = jnp.asarray(dt, dtype=jnp.float64)

    window = deque(maxlen=3)
    out = {key: [] for key in ('states', 'frames', 'psi', 'A', 'psi_t', 'A_t', 'A_t_integral')}
    agreement = 0.0
    for index, u in enumerate(states):
        traj = flow.heat_solve(u, tol_Q=tol_Q, s_levels=s_levels)
        frame = build_caloric_frame(traj, reference_frame)
        window.append((traj, frame))
        if len(window) < 3:
            continue
        (traj_b, frame_b), (traj_c, frame_c), (traj_a, frame_a) = window
        dt_v = (traj_a.states - traj_b.states) / (2.0 * dt_arr)
        A_t = _frame_time_connection(frame_b.vectors, frame_c.vectors, frame_a.vectors, dt_arr)
        A_t_integral = _time_integral(traj_c, frame_c.vectors, dt_v, A_t[-1])
        agreement = max(agreement, float(jnp.max(jnp.abs(A_t - A_t_integral))))
        gauge = build_gauge(traj_c, frame_c, with_integral=False)
        out['states'].append(traj_c.states[0])
        out['frames'].append(frame_c.vectors[0])
        out['psi'].append(gauge.psi[0])
        out['A'].append(gauge.A[0])
        out['psi_t'].append(jnp.einsum('xyc,xypc->xyp', dt_v[0], frame_c.vectors[0]))
        out['A_t'].append(A_t[0])
        out['A_t_integral'].append(A_t_integral[0])
        if flow.verbose:
            log_metrics('time gauge', index - 1, {'A_t_agreement': agreement,
                                                  'psi_t_sup': jnp.max(jnp.abs(out['psi_t'][-1]))})

    fields = {key: jnp.stack(values) for key, values in out.items()}
    torsion = torsion_residual(flow.grid, fields['psi'], fields['A'], fields['psi_t'], fields['A_t'], dt)
    fd_error = time_difference_error(states, dt)
    dt_scale = float(jnp.max(jnp.abs(states[2].values - states[0].values))) / (2.0 * dt)
    coarse = bool(np.isfinite(fd_error) and fd_error > COARSE_RATIO * max(dt_scale, 1e-300))
    return TimeGauge(
        grid=flow.grid,
        times=dt * np.arange(1, len(states) - 1),
        dt=float(dt),
        s_levels=s_levels,
        A_t_agreement=agreement,
        torsion_residual=torsion,
        fd_error=fd_error,
        t_grid_coarse=coarse,
        **fields,
    )


def torsion_residual(grid: Grid2, psi: chex.Array, A: chex.Array, psi_t: chex.Array, A_t: chex.Array,
                     dt: float) -> np.ndarray:
    """sup_x |D_t psi_i - D_i psi_t| per time, with D_t w = d_t w + A_t^T w and d_t from centred differences.

    The first and last entries have no centred difference and are nan.
    """
    d_t_psi = (psi[2:] - psi[:-2]) / (2.0 * dt)
    residual = np.full(psi.shape[0], np.nan)
    if psi.shape[0] < 3:
        return residual
    inner = slice(1, -1)
    defects = []
    for i in range(2):
        D_t = d_t_psi[:, :, :, i] + jnp.einsum('...pq,...p->...q', A_t[inner], psi[inner, :, :, i])
        D_i = covariant_derivative(grid, A[inner, :, :, i], psi_t[inner], i)
        defects.append(jnp.max(jnp.abs(D_t - D_i), axis=(1, 2, 3)))
    residual[inner] = np.asarray(jnp.maximum(*defects))
    return residual


def time_difference_error(states: Sequence[MapField], dt: float) -> float:
    """Richardson estimate (D_{2dt} - D_dt) / 3 of the centred-difference error in d_t u, sup over times and points."""
    if len(states) < 5:
        return float('nan')
    u = jnp.stack([state.values for state in states])
    d_h = (u[3:-1] - u[1:-3]) / (2.0 * dt)
    d_2h = (u[4:] - u[:-4]) / (4.0 * dt)
    return float(jnp.max(jnp.abs(d_2h - d_h))) / 3.0
