import math
import os
import warnings
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.common import log_metrics
from core.errors import CaloricError, SLConstraintViolation, SLStabilityError
from core.spectral.grid import Grid2
from core.spectral.io import write_field_dump, write_table
from core.targets.sphere import Sphere2
from core.targets.target import TargetManifold
from core.types import MapField

# dt <= SL_STABILITY * dx^2 / pi^2
SL_STABILITY = 0.2
CONSTRAINT_TOLERANCE = 1e-9
# per-step relative energy drift above this is reported
ENERGY_DRIFT_TOLERANCE = 1e-8


@chex.dataclass(frozen=True)
class SLStepDiagnostics:
    """Diagnostics of one or more Schrodinger map steps.
    - `pre_retract_defect`: largest distance to the target before retraction
    - `post_retract_defect`: largest distance to the target after retraction
    - `energy_drift`: largest per-step |E(u_{n+1}) - E(u_n)|
    """
    pre_retract_defect: chex.Array
    post_retract_defect: chex.Array
    energy_drift: chex.Array


@chex.dataclass(frozen=True)
class SLSeries:
    """Schrodinger map flow sampled on a uniform time grid.
    - `grid`: spatial grid
    - `target`: target manifold
    - `t_grid`: sample times, shape (T,)
    - `dt`: integrator step
    - `states`: maps per sample, shape (T, n, n, N)
    - `energy_series`: E(u(t))
    - `mass_series`: M(u(t)) = 1/2 int |u - Q|^2
    - `supdist_series`: sup_x |u(t) - Q|
    - `tension_series`: ||tau(u(t))||_{L^2}
    - `constraint_series`: largest distance to the target
    - `base_point`: Q used by the mass and distance series
    - `completed`: False for the partial series attached to an aborted run
    """
    grid: Grid2
    target: TargetManifold
    t_grid: np.ndarray
    dt: float
    states: chex.Array
    energy_series: np.ndarray
    mass_series: np.ndarray
    supdist_series: np.ndarray
    tension_series: np.ndarray
    constraint_series: np.ndarray
    base_point: np.ndarray
    completed: bool = True

    @property
    def n_samples(self) -> int:
        return int(self.t_grid.shape[0])

    @property
    def sample_dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0]) if self.n_samples > 1 else self.dt

    def state(self, index: int) -> MapField:
        return MapField(grid=self.grid, target=self.target, values=self.states[index])

    def maps(self) -> List[MapField]:
        return [self.state(i) for i in range(self.n_samples)]

    def relative_energy_drift(self) -> float:
        e0 = float(self.energy_series[0])
        drift = float(np.max(np.abs(self.energy_series - e0)))
        return drift / e0 if e0 > 0 else drift


class SchrodingerMapFlow:
    """Schrodinger map flow u_t = J_u P_u(Laplacian u) on a periodic grid.

    Method of lines with the three-stage strong-stability-preserving Runge-Kutta scheme on the
    dealiased pseudospectral right-hand side; each step ends with one retraction onto the target.
    """

    def __init__(self, grid: Grid2, target: TargetManifold, stability_factor: float = SL_STABILITY,
                 verbose: bool = False):
        """
        Args:
        - `grid`: spatial grid
        - `target`: Kahler target manifold
        - `stability_factor`: c in dt <= c dx^2 / pi^2
        - `verbose`: print one line per saved sample
        """
        self.grid = grid
        self.target = target
        self.stability_factor = stability_factor
        self.verbose = verbose

    def __hash__(self):
        return hash((self.grid, self.target, self.stability_factor))

    def __eq__(self, other):
        return isinstance(other, SchrodingerMapFlow) and \
            (self.grid, self.target, self.stability_factor) == (other.grid, other.target, other.stability_factor)

    def get_config(self) -> Dict:
        return {
            'integrator': 'ssprk3',
            'stability_factor': self.stability_factor,
            'dt_max': self.dt_max,
            **self.grid.get_config(),
            **self.target.get_config(),
        }

    @property
    def dt_max(self) -> float:
        return self.stability_factor * self.grid.dx ** 2 / math.pi ** 2

    # ---- monitored quantities ----

    @partial(jax.jit, static_argnums=(0,))
    def energy(self, values: chex.Array) -> chex.Array:
        """E(u) = 1/2 int |du|^2, spectral quadrature"""
        return 0.5 * self.grid.derivative_norm(values, 1) ** 2

    @partial(jax.jit, static_argnums=(0,))
    def mass(self, values: chex.Array, point: chex.Array) -> chex.Array:
        """M(u) = 1/2 int |u - point|^2"""
        return 0.5 * jnp.sum((values - point) ** 2) * self.grid.cell_area

    @partial(jax.jit, static_argnums=(0,))
    def tension(self, values: chex.Array) -> chex.Array:
        return self.target.project_tangent(values, self.grid.laplacian(values))

    @partial(jax.jit, static_argnums=(0,))
    def tension_norm(self, values: chex.Array) -> chex.Array:
        """||tau(u)||_{L^2} with tau(u) = P_u(Laplacian u)"""
        return jnp.sqrt(jnp.sum(self.tension(values) ** 2) * self.grid.cell_area)

    @partial(jax.jit, static_argnums=(0,))
    def vector_field(self, values: chex.Array) -> chex.Array:
        """F(u) = J_u P_u(Laplacian u), dealiased"""
        return self.grid.dealias(self.target.complex_structure(values, self.tension(values)))

    # ---- integrator ----

    @partial(jax.jit, static_argnums=(0,))
    def _step(self, values: chex.Array, dt: chex.Array) -> Tuple[chex.Array, SLStepDiagnostics]:
        F = self.vector_field
        u1 = values + dt * F(values)
        u2 = 0.75 * values + 0.25 * (u1 + dt * F(u1))
        u3 = values / 3.0 + 2.0 / 3.0 * (u2 + dt * F(u2))
        new_values = self.target.retract(u3)
        diagnostics = SLStepDiagnostics(
            pre_retract_defect=jnp.max(self.target.distance_to_manifold(u3)),
            post_retract_defect=jnp.max(self.target.distance_to_manifold(new_values)),
            energy_drift=jnp.abs(self.energy(new_values) - self.energy(values)),
        )
        return new_values, diagnostics

    @partial(jax.jit, static_argnums=(0,))
    def _advance(self, values: chex.Array, dt: chex.Array, n_steps: chex.Array) -> Tuple[chex.Array, SLStepDiagnostics]:
        zero = jnp.zeros((), dtype=values.dtype)
        init = (values, SLStepDiagnostics(pre_retract_defect=zero, post_retract_defect=zero, energy_drift=zero))

        def body(_, carry):
            u, acc = carry
            u, diag = self._step(u, dt)
            return u, jax.tree_util.tree_map(jnp.maximum, acc, diag)

        return jax.lax.fori_loop(0, n_steps, body, init)

    def _check_dt(self, dt: float) -> None:
        if dt == 0 or not math.isfinite(dt):
            raise SLStabilityError(f"time step must be finite and nonzero, got {dt}")
        if abs(dt) > self.dt_max * (1 + 1e-12):
            raise SLStabilityError(f"|dt|={abs(dt):.4e} exceeds the stability bound {self.dt_max:.4e} "
                                   f"({self.stability_factor} dx^2 / pi^2)")

    def _check(self, diagnostics: SLStepDiagnostics, reference_energy: float) -> None:
        post = float(diagnostics.post_retract_defect)
        if post > CONSTRAINT_TOLERANCE:
            raise SLConstraintViolation(
                f"retraction left the map {post:.3e} off the target "
                f"(pre-retract defect {float(diagnostics.pre_retract_defect):.3e})")
        drift = float(diagnostics.energy_drift)
        if drift > ENERGY_DRIFT_TOLERANCE * max(reference_energy, 1e-300):
            warnings.warn(f"per-step energy drift {drift:.3e} exceeds {ENERGY_DRIFT_TOLERANCE:.0e} E")

    def sl_step(self, u: MapField, dt: float) -> MapField:
        """One SSP-RK3 step followed by retraction; a negative dt steps backward in time.

        Args:
        - `u`: current map
        - `dt`: step, |dt| <= stability_factor dx^2 / pi^2

        Returns:
        - (MapField): map after the step
        """
        self._check_dt(dt)
        values, diagnostics = self._step(u.values, jnp.asarray(dt, dtype=jnp.float64))
        self._check(diagnostics, float(self.energy(u.values)))
        return u.replace(values=values)

    def evolve(self, u: MapField, dt: float, n_steps: int) -> MapField:
        """n_steps steps of size dt without sampling."""
        self._check_dt(dt)
        values, diagnostics = self._advance(u.values, jnp.asarray(dt, dtype=jnp.float64), n_steps)
        self._check(diagnostics, float(self.energy(u.values)))
        return u.replace(values=values)

    def time_reversal_error(self, u: MapField, dt: float, n_steps: int) -> float:
        """sup_x |u0 - (backward o forward)(u0)| after n_steps steps each way."""
        forward = self.evolve(u, dt, n_steps)
        back = self.evolve(forward, -dt, n_steps)
        return float(jnp.max(jnp.abs(back.values - u.values)))

    def _series(self, times: Sequence[float], states: Sequence[chex.Array], dt: float, point: chex.Array,
                completed: bool) -> SLSeries:
        stacked = jnp.stack(list(states))
        per_sample = lambda fn: np.array([float(fn(v)) for v in stacked])
        return SLSeries(
            grid=self.grid,
            target=self.target,
            t_grid=np.asarray(times, dtype=np.float64),
            dt=dt,
            states=stacked,
            energy_series=per_sample(self.energy),
            mass_series=per_sample(lambda v: self.mass(v, point)),
            supdist_series=per_sample(lambda v: jnp.max(jnp.linalg.norm(v - point, axis=-1))),
            tension_series=per_sample(self.tension_norm),
            constraint_series=per_sample(lambda v: jnp.max(self.target.distance_to_manifold(v))),
            base_point=np.asarray(point),
            completed=completed,
        )

    def sl_solve(self, u0: MapField, T: float, dt: float, sample_every: int = 1,
                 checkpoint_dir: Optional[str] = None, checkpoint_every: int = 0,
                 point: Optional[chex.Array] = None) -> SLSeries:
        """Evolves u0 on [0, T] and samples the monitored quantities.

        dt is shrunk so that T is a whole number of steps. On a mid-run failure the error is
        re-raised with the series up to the last good sample attached as `last_good` (and
        written as a checkpoint when `checkpoint_dir` is set).

        Args:
        - `u0`: initial map
        - `T`: final time
        - `dt`: requested step
        - `sample_every`: steps between stored samples
        - `checkpoint_dir`: (optional) directory for field-dump checkpoints
        - `checkpoint_every`: samples between checkpoints (0 disables them)
        - `point`: (optional) reference point for mass and distance, defaults to Q

        Returns:
        - (SLSeries): sampled solution
        """
        chex.assert_tree_all_finite(u0.values)
        if not T > 0:
            raise SLStabilityError(f"final time must be positive, got {T}")
        n_steps = max(1, int(math.ceil(T / dt - 1e-9)))
        dt = T / n_steps
        self._check_dt(dt)
        point = jnp.asarray(self.target.base_point if point is None else point)
        sample_every = max(1, min(sample_every, n_steps))
        e0 = float(self.energy(u0.values))
        dt_arr = jnp.asarray(dt, dtype=jnp.float64)

        values = u0.values
        times, states = [0.0], [values]
        step = 0
        while step < n_steps:
            chunk = min(sample_every, n_steps - step)
            try:
                values, diagnostics = self._advance(values, dt_arr, chunk)
                self._check(diagnostics, e0)
            except CaloricError as err:
                err.last_good = self._series(times, states, dt, point, completed=False)
                if checkpoint_dir is not None:
                    self._checkpoint(checkpoint_dir, len(states) - 1, states[-1])
                raise
            step += chunk
            times.append(step * dt)
            states.append(values)
            if checkpoint_dir is not None and checkpoint_every and (len(states) - 1) % checkpoint_every == 0:
                self._checkpoint(checkpoint_dir, len(states) - 1, values)
            if self.verbose:
                log_metrics('sl sample', len(states) - 1, {'t': times[-1], 'energy': self.energy(values),
                                                           'defect': diagnostics.post_retract_defect})
        return self._series(times, states, dt, point, completed=True)

    def _checkpoint(self, directory: str, index: int, values: chex.Array) -> None:
        os.makedirs(directory, exist_ok=True)
        write_field_dump(os.path.join(directory, f"checkpoint_{index:05d}.bin"), self.grid, values)


def helix_solution(grid: Grid2, theta: float, mode: int, t: float = 0.0) -> MapField:
    """Precessing helix on S^2, u = (cos th, sin th cos(k x_1 - w t), sin th sin(k x_1 - w t))
    with k = 2 pi mode / L and w = k^2 cos th, an exact solution of u_t = u x Laplacian u.

    Args:
    - `grid`: spatial grid
    - `theta`: cone angle
    - `mode`: integer winding number along x_1
    - `t`: time

    Returns:
    - (MapField): the helix at time t
    """
    k = helix_wavenumber(grid, mode)
    omega = k ** 2 * math.cos(theta)
    x1, _ = grid.mesh
    phase = k * x1 - omega * t
    values = np.stack([np.full_like(x1, math.cos(theta)),
                       math.sin(theta) * np.cos(phase),
                       math.sin(theta) * np.sin(phase)], axis=-1)
    return MapField(grid=grid, target=Sphere2(), values=jnp.asarray(values))


def helix_wavenumber(grid: Grid2, mode: int) -> float:
    return 2.0 * math.pi * mode / grid.side_length


def helix_period(grid: Grid2, theta: float, mode: int) -> float:
    """2 pi / w for the helix of `helix_solution`"""
    return 2.0 * math.pi / (helix_wavenumber(grid, mode) ** 2 * abs(math.cos(theta)))


def save_series(series: SLSeries, path: str, residual: Optional[np.ndarray] = None) -> None:
    """Writes the monitored series as CSV (t, energy, mass, supdist_Q, residual); residual is nan when absent."""
    residual = np.full(series.n_samples, np.nan) if residual is None else np.asarray(residual)
    rows = zip(series.t_grid, series.energy_series, series.mass_series, series.supdist_series, residual)
    write_table(path, list(rows), ['t', 'energy', 'mass', 'supdist_Q', 'residual'])
