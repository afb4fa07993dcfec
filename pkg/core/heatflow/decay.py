from typing import Callable, Dict, List, Optional, Sequence, Tuple

import chex
import jax.numpy as jnp
import numpy as np

from core.common import log_metrics
from core.diagnostics.envelopes import DEFAULT_DELTA, field_envelope
from core.diagnostics.fitting import DecayFit, SlopeFit, decay_fit, log_log_slope
from core.errors import FitError, GridError
from core.heatflow.heat import HarmonicMapHeatFlow, HeatTrajectory
from core.spectral.littlewood_paley import LittlewoodPaley
from core.types import MapField

MIN_WINDOW_SAMPLES = 5
# shell profiles are fitted up to this many parabolic times s 2^(2k) of the shell
PROFILE_FIT_WINDOW = 1.0


@chex.dataclass(frozen=True)
class DecayRate:
    """Fitted decay of ||d^(j+1) v(s)||_{L^2} against s.
    - `j`: derivative order minus one
    - `slope`: fitted log-log slope
    - `expected`: the parabolic rate -j/2
    - `window`: (s_lo, s_hi) used for the fit
    - `n_samples`: levels inside the window
    """
    j: int
    slope: float
    expected: float
    window: Tuple[float, float]
    n_samples: int


@chex.dataclass(frozen=True)
class FrequencyProfile:
    """Weighted shell profile (1 + s 2^(2k))^M 2^k ||P_k v(s)||_{L^2} of a heat trajectory.
    - `k`: shell index
    - `M`: weight exponent
    - `values`: profile per level
    - `maximum`: sup over levels
    - `initial`: value at s = 0
    - `normalized`: maximum divided by the initial envelope value gamma_k(0) (0 when that vanishes)
    - `fit`: fit of the unweighted profile to (1 + s 2^(2k))^(-M) over s 2^(2k) <= 1, None when not enough samples
    """
    k: int
    M: float
    values: np.ndarray
    maximum: float
    initial: float
    normalized: float
    fit: Optional[DecayFit]


def default_window(traj: HeatTrajectory) -> Tuple[float, float]:
    """Mid-range s-window: past the grid-scale initial layer, before the low modes saturate."""
    cutoff = 2.0 / 3.0 * traj.grid.nyquist
    return 16.0 / cutoff ** 2, 0.25 / traj.grid.xi_min ** 2


def derivative_norms(traj: HeatTrajectory, order: int) -> np.ndarray:
    """||d^order v(s)||_{L^2} per level"""
    return np.array([float(traj.grid.derivative_norm(v, order)) for v in traj.states])


def decay_rates(traj: HeatTrajectory, j: int, window: Optional[Tuple[float, float]] = None) -> DecayRate:
    """Slope of log ||d^(j+1) v||_{L^2} against log s over a mid-range window; the parabolic
    estimate predicts -j/2.

    Args:
    - `traj`: converged heat trajectory
    - `j`: 0..3
    - `window`: (optional) (s_lo, s_hi), defaults to `default_window`

    Returns:
    - (DecayRate): fitted and expected slopes
    """
    if not 0 <= j <= 3:
        raise FitError(f"decay rates are fitted for j in 0..3, got {j}")
    if not traj.converged_to_Q:
        raise FitError(f"heat trajectory is not converged (sup distance to its limit {traj.sup_dist_limit:.3e})")
    s_lo, s_hi = default_window(traj) if window is None else window
    s = np.asarray(traj.s_levels)
    norms = derivative_norms(traj, j + 1)
    inside = (s >= s_lo) & (s <= s_hi) & (norms > 0)
    if int(inside.sum()) < MIN_WINDOW_SAMPLES:
        raise FitError(f"only {int(inside.sum())} usable levels in [{s_lo:.4e}, {s_hi:.4e}], need {MIN_WINDOW_SAMPLES}")
    fit: SlopeFit = log_log_slope(s[inside], norms[inside])
    return DecayRate(j=j, slope=fit.slope, expected=-j / 2, window=(float(s_lo), float(s_hi)), n_samples=fit.n_samples)


def frequency_decay_profile(traj: HeatTrajectory, k: int, M: float, delta: float = DEFAULT_DELTA) -> FrequencyProfile:
    """sup_s (1 + s 2^(2k))^M 2^k ||P_k v(s)||_{L^2}, reported against the initial envelope.

    Args:
    - `traj`: heat trajectory
    - `k`: shell index inside the grid's shell range
    - `M`: weight exponent
    - `delta`: envelope order of the normalisation

    Returns:
    - (FrequencyProfile): profile, its maximum and a decay fit of the unweighted profile
    """
    lp = LittlewoodPaley(traj.grid)
    if k < lp.k_min or k > lp.k_max:
        raise GridError(f"shell {k} outside the grid range [{lp.k_min}, {lp.k_max}]")
    index = k - lp.k_min
    s = np.asarray(traj.s_levels)
    shell = np.array([float(lp.shell_l2_norms(v)[index]) for v in traj.states]) * 2.0 ** k
    values = (1.0 + s * 4.0 ** k) ** M * shell
    if not np.all(np.isfinite(values)):
        raise FitError(f"profile for shell {k} is not finite")
    envelope = field_envelope(lp, traj.states[0], sigma=0.0, delta=delta).values[index]
    maximum = float(values.max())
    try:
        fit = decay_fit(s, shell, k, window=PROFILE_FIT_WINDOW)
    except FitError:
        fit = None
    return FrequencyProfile(
        k=k, M=M, values=values, maximum=maximum, initial=float(values[0]),
        normalized=maximum / envelope if envelope > 0 else 0.0, fit=fit,
    )


def smallness_sweep(flow: HarmonicMapHeatFlow, data_fn: Callable[[float], MapField], energies: Sequence[float],
                    tol_Q: float = 1e-6, s_max: Optional[float] = None, verbose: bool = False) -> List[Dict]:
    """Runs the heat flow for data of increasing energy and reports how convergence and the
    parabolic decay rate behave as the smallness assumption is relaxed.

    Args:
    - `flow`: heat flow solver
    - `data_fn`: maps a target energy to initial data
    - `energies`: energies to sweep
    - `tol_Q`: convergence tolerance
    - `s_max`: (optional) final heat time

    Returns:
    - (List[Dict]): one summary per energy
    """
    rows = []
    for i, target_energy in enumerate(energies):
        u = data_fn(float(target_energy))
        traj = flow.heat_solve(u, s_max=s_max, tol_Q=tol_Q)
        try:
            slope = decay_rates(traj, 1).slope
        except FitError:
            slope = float('nan')
        row = {
            'energy': float(traj.energies[0]),
            'converged': float(traj.converged_to_Q),
            'sup_dist_limit': traj.sup_dist_limit,
            'energy_monotone': float(traj.energy_monotone),
            'slope_j1': slope,
            'max_substeps': float(jnp.max(traj.substeps)),
        }
        if verbose:
            log_metrics('smallness sweep', i, row)
        rows.append(row)
    return rows
