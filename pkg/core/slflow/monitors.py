import math
from typing import Optional

import chex
import jax.numpy as jnp
import numpy as np

from core.common import multiply_by_i
from core.diagnostics.fitting import SlopeFit
from core.errors import FitError
from core.gauge.fields import covariant_derivative, level_gradient
from core.gauge.identities import covariant_laplacian, curvature_forcing
from core.gauge.time_series import TimeGauge
from core.slflow.schrodinger import SchrodingerMapFlow, SLSeries, helix_wavenumber
from core.targets.target import TargetManifold
from core.types import MapField

MIN_DECAY_SAMPLES = 16
# relative spread below which a distance series counts as constant
CONSTANT_SPREAD = 1e-6
# relative allowance for sampling the mass bound at discrete times
MASS_BOUND_SLACK = 1.1
MASS_ROUNDOFF = 1e-10


@chex.dataclass(frozen=True)
class DecayReport:
    """Trend of sup_x |u(t) - Q| over a series.
    - `supdist`: the distance series
    - `onset`: sample index the decay check starts from
    - `window`: (t_start, t_end) of the fitted final half-window
    - `trend`: slope of sup_x |u - Q| against t over the window (nan when not assertable)
    - `nonincreasing`: no sample after the onset exceeds the value at the onset
    - `constant`: the series is constant to a relative 1e-6 (non-decaying symmetric solutions)
    - `assertable`: the series holds at least 16 samples
    """
    supdist: np.ndarray
    onset: int
    window: tuple
    trend: float
    nonincreasing: bool
    constant: bool
    assertable: bool


def asymptotic_decay_check(series: SLSeries, onset: int = 0) -> DecayReport:
    """Transient decay of sup_x |u(t) - Q| on the box. Energy recurs on a periodic box, so only
    decay over windows shorter than the recurrence time is meaningful.

    Args:
    - `series`: monitored SL series
    - `onset`: first sample of the dispersive phase

    Returns:
    - (DecayReport): distance series, trend and flags
    """
    d = np.asarray(series.supdist_series)
    t = np.asarray(series.t_grid)
    scale = max(float(np.max(np.abs(d))), 1e-300)
    constant = bool(np.ptp(d) <= CONSTANT_SPREAD * scale) if d.size else True
    assertable = d.size >= MIN_DECAY_SAMPLES
    half = d.size // 2
    window = (float(t[half]), float(t[-1])) if d.size else (0.0, 0.0)
    trend = float(np.polyfit(t[half:], d[half:], 1)[0]) if assertable else float('nan')
    tail = d[onset:]
    nonincreasing = bool(tail.size == 0 or np.all(tail <= tail[0] * (1 + 1e-12) + 1e-300))
    return DecayReport(supdist=d, onset=onset, window=window, trend=trend, nonincreasing=nonincreasing,
                       constant=constant, assertable=assertable)


@chex.dataclass(frozen=True)
class GaugedResidual:
    """Residuals of the gauged Schrodinger system at s = 0.
    - `equation`: max over i, x and interior t of |D_t psi_i - J(sum_j D_j D_j psi_i + sum_j R(psi_i, psi_j) psi_j)|
    - `equation_per_t`: the same per interior time
    - `psi_t_identity`: max |psi_t - J sum_i D_i psi_i|
    - `curvature_term`: sup of the curvature term (identically 0 on flat targets)
    - `scale`: sup |D_t psi_i|, for relative comparisons
    """
    equation: float
    equation_per_t: np.ndarray
    psi_t_identity: float
    curvature_term: float
    scale: float


def gauged_residual(gauge: TimeGauge, target: TargetManifold) -> GaugedResidual:
    """Checks -i D_t phi_i = sum_j D_j D_j phi_i + sum_j R(phi_i, phi_j) phi_j and phi_t = i sum_i D_i phi_i
    on the frame components of a time-series gauge; i acts on realified pairs.
    """
    if gauge.psi.shape[0] < 3:
        raise FitError(f"need at least 3 gauged times, got {gauge.psi.shape[0]}")
    grid = gauge.grid
    dv = level_gradient(grid, gauge.states)
    forcing = curvature_forcing(target, gauge.states, dv, gauge.frames)
    divergence = sum(covariant_derivative(grid, gauge.A[:, :, :, j], gauge.psi[:, :, :, j], j) for j in range(2))
    psi_t_identity = float(jnp.max(jnp.abs(gauge.psi_t - multiply_by_i(divergence))))

    inner = slice(1, -1)
    d_t_psi = (gauge.psi[2:] - gauge.psi[:-2]) / (2.0 * gauge.dt)
    A_inner = gauge.A[inner]
    per_t, scale = [], 0.0
    for i in range(2):
        D_t = d_t_psi[:, :, :, i] + jnp.einsum('...pq,...p->...q', gauge.A_t[inner], gauge.psi[inner, :, :, i])
        rhs = covariant_laplacian(grid, A_inner, gauge.psi[inner, :, :, i]) + forcing[inner, :, :, i]
        per_t.append(jnp.max(jnp.abs(D_t - multiply_by_i(rhs)), axis=(1, 2, 3)))
        scale = max(scale, float(jnp.max(jnp.abs(D_t))))
    equation_per_t = np.asarray(jnp.maximum(*per_t))
    return GaugedResidual(
        equation=float(equation_per_t.max()),
        equation_per_t=equation_per_t,
        psi_t_identity=psi_t_identity,
        curvature_term=float(jnp.max(jnp.abs(forcing))),
        scale=scale,
    )


def tension_growth_rate(series: SLSeries) -> SlopeFit:
    """Gronwall exponent: slope of log ||tau(u(t))||_{L^2} against t."""
    t, y = np.asarray(series.t_grid), np.asarray(series.tension_series)
    usable = y > 0
    if usable.sum() < 2:
        raise FitError("tension norm vanishes on the whole series")
    slope, intercept = np.polyfit(t[usable], np.log(y[usable]), 1)
    return SlopeFit(slope=float(slope), intercept=float(intercept), n_samples=int(usable.sum()))


@chex.dataclass(frozen=True)
class MassGrowth:
    """Linear bound |M(u(t)) - M(u0)| <= C t.
    - `rate`: smallest C for which the bound holds on the series
    - `fitted_rate`: least-squares slope of M(u(t)) - M(u0) against t
    - `bound`: sup_t sqrt(2 M(u(t))) ||tau(u(t))||_{L^2}, which bounds |dM/dt| since
      dM/dt = <u - Q, u_t> and |u_t| = |tau|
    - `bounded`: `rate` is finite and within `bound`
    """
    rate: float
    fitted_rate: float
    bound: float
    bounded: bool


def mass_growth(series: SLSeries) -> MassGrowth:
    """Measures how fast the mass M(u) = 1/2 int |u - Q|^2 moves and compares the rate against the
    a-priori bound from the tension norm."""
    t, m = np.asarray(series.t_grid), np.asarray(series.mass_series)
    tension = np.asarray(series.tension_series)
    later = t > 0
    change = m[later] - m[0]
    rate = float(np.max(np.abs(change) / t[later])) if later.any() else 0.0
    fitted = float(np.sum(t[later] * change) / np.sum(t[later] ** 2)) if later.any() else 0.0
    bound = float(np.max(np.sqrt(2.0 * np.maximum(m, 0.0)) * tension))
    bounded = math.isfinite(rate) and rate <= MASS_BOUND_SLACK * bound + MASS_ROUNDOFF
    return MassGrowth(rate=rate, fitted_rate=fitted, bound=bound, bounded=bool(bounded))


def helix_phase_error(series: SLSeries, theta: float, mode: int) -> np.ndarray:
    """|phase of the numerical helix - closed-form phase -w t| per sample, wrapped to [0, pi]."""
    grid = series.grid
    k = helix_wavenumber(grid, mode)
    omega = k ** 2 * math.cos(theta)
    x1, _ = grid.mesh
    carrier = jnp.exp(-1j * k * jnp.asarray(x1))
    amplitude = jnp.sum((series.states[..., 1] + 1j * series.states[..., 2]) * carrier, axis=(1, 2))
    phase = np.angle(np.asarray(amplitude))
    error = np.angle(np.exp(1j * (phase + omega * np.asarray(series.t_grid))))
    return np.abs(error)


def self_convergence_order(flow: SchrodingerMapFlow, u0: MapField, T: float, n_steps: Optional[int] = None) -> float:
    """Richardson order log2(|u_dt - u_{dt/2}| / |u_{dt/2} - u_{dt/4}|) at time T, starting from
    n_steps steps (default: the fewest stable ones)."""
    n0 = max(1, int(math.ceil(T / flow.dt_max - 1e-9))) if n_steps is None else n_steps
    finals = [flow.evolve(u0, T / (n0 * r), n0 * r).values for r in (1, 2, 4)]
    coarse = float(jnp.max(jnp.abs(finals[0] - finals[1])))
    fine = float(jnp.max(jnp.abs(finals[1] - finals[2])))
    if fine == 0.0:
        raise FitError("successive refinements agree exactly; order undefined")
    return math.log2(coarse / fine)
