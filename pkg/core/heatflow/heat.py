import math
import os
import warnings
from functools import partial
from typing import Dict, Optional, Tuple

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.common import log_metrics
from core.errors import ConstraintViolation, StabilityError
from core.spectral.grid import Grid2
from core.spectral.io import write_field_dump, write_table
from core.targets.target import TargetManifold
from core.types import MapField

# contour points for the phi-function quadrature
CONTOUR_POINTS = 32
# largest admissible ds * ||dv||^2_inf
NONLINEAR_STABILITY = 0.5
POST_RETRACT_TOLERANCE = 1e-8
ENERGY_TOLERANCE = 1e-8


@chex.dataclass(frozen=True)
class StepDiagnostics:
    """Diagnostics accumulated over one or more heat steps.
    - `pre_retract_defect`: largest distance to the target before retraction
    - `post_retract_defect`: largest distance to the target after retraction
    - `energy_rise`: largest per-step energy increase
    """
    pre_retract_defect: chex.Array
    post_retract_defect: chex.Array
    energy_rise: chex.Array


@chex.dataclass(frozen=True)
class HeatTrajectory:
    """Harmonic map heat flow sampled on an increasing s-grid.
    - `grid`: spatial grid
    - `target`: target manifold
    - `s_levels`: heat times, s_levels[0] = 0, shape (L,)
    - `states`: map values per level, shape (L, n, n, N)
    - `energies`: Dirichlet energy per level
    - `tension_sq`: ||tau(v)||^2_{L^2} per level, tau(v) = P_v(Laplacian v)
    - `sup_dist_Q`: sup_x |v(s) - Q| per level
    - `constraint_defect`: largest distance to the target per level
    - `substeps`: integrator steps taken to reach each level from the previous one
    - `limit_point`: constant limit Q_inf of the flow on the periodic box
    - `sup_dist_limit`: sup_x |v(s_max) - Q_inf|
    - `converged_to_Q`: whether sup_dist_limit <= tol_Q
    - `energy_monotone`: whether the energy never rose by more than the tolerance
    - `within_smallness`: whether E(u) was below the smallness threshold
    """
    grid: Grid2
    target: TargetManifold
    s_levels: chex.Array
    states: chex.Array
    energies: chex.Array
    tension_sq: chex.Array
    sup_dist_Q: chex.Array
    constraint_defect: chex.Array
    substeps: chex.Array
    limit_point: chex.Array
    sup_dist_limit: float
    converged_to_Q: bool
    energy_monotone: bool
    within_smallness: bool

    @property
    def n_levels(self) -> int:
        return int(self.s_levels.shape[0])

    @property
    def s_max(self) -> float:
        return float(self.s_levels[-1])

    def state(self, level: int) -> MapField:
        return MapField(grid=self.grid, target=self.target, values=self.states[level])


def heat_levels(s_max: float, s_min: float, ramp_levels: int = 4, samples_per_octave: int = 4) -> np.ndarray:
    """s-grid: a linear ramp from 0 to s_min, then geometric with ratio 2^(1/samples_per_octave)
    up to the first level >= s_max. With the default ratio 2^(1/4) every dyadic block
    [2^(2j-1), 2^(2j+1)] holds 8 samples.
    """
    if not 0 < s_min < s_max:
        raise StabilityError(f"need 0 < s_min < s_max, got s_min={s_min}, s_max={s_max}")
    ramp = s_min * np.arange(ramp_levels + 1) / ramp_levels
    n_geometric = int(math.ceil(samples_per_octave * math.log2(s_max / s_min) - 1e-9))
    geometric = s_min * 2.0 ** (np.arange(1, n_geometric + 1) / samples_per_octave)
    return np.concatenate([ramp, geometric])


def default_s_max(grid: Grid2) -> float:
    """64 times the time scale of the lowest nonzero mode"""
    return 64.0 / grid.xi_min ** 2


class HarmonicMapHeatFlow:
    """Extrinsic harmonic map heat flow dv/ds = Laplacian v - S(v)(dv, dv) on a periodic grid.

    The linear heat part is integrated exactly in Fourier space and the dealiased
    pseudospectral nonlinearity with second-order exponential time differencing (ETDRK2);
    every step ends with a retraction onto the target.
    """

    def __init__(self, grid: Grid2, target: TargetManifold, smallness: float = 0.05,
                 stability_fraction: float = 0.5, max_ds: Optional[float] = None, verbose: bool = False):
        """
        Args:
        - `grid`: spatial grid
        - `target`: target manifold
        - `smallness`: energy threshold below which data counts as small
        - `stability_fraction`: fraction of the nonlinear stability bound used by adaptive substeps
        - `max_ds`: (optional) upper bound on the step size
        - `verbose`: print one line per s-level
        """
        self.grid = grid
        self.target = target
        self.smallness = smallness
        self.stability_fraction = stability_fraction
        self.max_ds = max_ds
        self.verbose = verbose

    def __hash__(self):
        return hash((self.grid, self.target))

    def __eq__(self, other):
        return isinstance(other, HarmonicMapHeatFlow) and (self.grid, self.target) == (other.grid, other.target)

    def get_config(self) -> Dict:
        return {
            'integrator': 'etdrk2',
            'smallness': self.smallness,
            'stability_fraction': self.stability_fraction,
            'max_ds': self.max_ds,
            **self.grid.get_config(),
            **self.target.get_config(),
        }

    # ---- field quantities ----

    @partial(jax.jit, static_argnums=(0,))
    def energy(self, values: chex.Array) -> chex.Array:
        """E(v) = 1/2 sum |xi|^2 |v_hat|^2 (spectral quadrature)."""
        return 0.5 * self.grid.derivative_norm(values, 1) ** 2

    @partial(jax.jit, static_argnums=(0,))
    def tension(self, values: chex.Array) -> chex.Array:
        """tau(v) = P_v(Laplacian v), the tension field."""
        return self.target.project_tangent(values, self.grid.laplacian(values))

    @partial(jax.jit, static_argnums=(0,))
    def tension_sq(self, values: chex.Array) -> chex.Array:
        return jnp.sum(self.tension(values) ** 2) * self.grid.cell_area

    @partial(jax.jit, static_argnums=(0,))
    def gradient_sup_sq(self, values: chex.Array) -> chex.Array:
        """||dv||^2_inf = sup_x (|d_1 v|^2 + |d_2 v|^2)"""
        d1, d2 = self.grid.gradient(values)
        return jnp.max(jnp.sum(d1 ** 2 + d2 ** 2, axis=-1))

    @partial(jax.jit, static_argnums=(0,))
    def nonlinearity(self, values: chex.Array) -> chex.Array:
        """-S(v)(dv, dv) = -sum_i S_v(d_i v, d_i v), dealiased."""
        d1, d2 = self.grid.gradient(values)
        sff = self.target.second_fundamental_form
        return self.grid.dealias(-(sff(values, d1, d1) + sff(values, d2, d2)))

    @partial(jax.jit, static_argnums=(0,))
    def velocity(self, values: chex.Array) -> chex.Array:
        """Right-hand side Laplacian v - S(v)(dv, dv) without dealiasing."""
        d1, d2 = self.grid.gradient(values)
        sff = self.target.second_fundamental_form
        return self.grid.laplacian(values) - (sff(values, d1, d1) + sff(values, d2, d2))

    # ---- integrator ----

    @partial(jax.jit, static_argnums=(0,))
    def _phi_functions(self, ds: chex.Array) -> Tuple[chex.Array, chex.Array, chex.Array]:
        """exp(z), phi_1(z), phi_2(z) for z = -ds |xi|^2, phi's by contour averaging."""
        z = -ds * jnp.asarray(self.grid.xi_squared)
        circle = jnp.exp(2j * jnp.pi * (jnp.arange(1, CONTOUR_POINTS + 1) - 0.5) / CONTOUR_POINTS)
        w = z[..., None] + circle
        phi1 = jnp.mean((jnp.exp(w) - 1.0) / w, axis=-1).real
        phi2 = jnp.mean((jnp.exp(w) - 1.0 - w) / w ** 2, axis=-1).real
        return jnp.exp(z), phi1, phi2

    @partial(jax.jit, static_argnums=(0,))
    def _step(self, values: chex.Array, ds: chex.Array) -> Tuple[chex.Array, StepDiagnostics]:
        expz, phi1, phi2 = (c[..., None] for c in self._phi_functions(ds))
        fft = partial(jnp.fft.fft2, axes=(0, 1))
        ifft = lambda x: jnp.fft.ifft2(x, axes=(0, 1)).real
        v_hat = fft(values)
        n_hat = fft(self.nonlinearity(values))
        a_hat = expz * v_hat + ds * phi1 * n_hat
        stage = ifft(a_hat)
        na_hat = fft(self.nonlinearity(stage))
        unconstrained = ifft(a_hat + ds * phi2 * (na_hat - n_hat))
        new_values = self.target.retract(unconstrained)
        diagnostics = StepDiagnostics(
            pre_retract_defect=jnp.max(self.target.distance_to_manifold(unconstrained)),
            post_retract_defect=jnp.max(self.target.distance_to_manifold(new_values)),
            energy_rise=self.energy(new_values) - self.energy(values),
        )
        return new_values, diagnostics

    @partial(jax.jit, static_argnums=(0,))
    def _advance(self, values: chex.Array, ds: chex.Array, n_steps: chex.Array) -> Tuple[chex.Array, StepDiagnostics]:
        """n_steps steps of size ds, diagnostics maximised over the steps"""
        zero = jnp.zeros((), dtype=values.dtype)
        init = (values, StepDiagnostics(pre_retract_defect=zero, post_retract_defect=zero,
                                       energy_rise=jnp.full((), -jnp.inf, dtype=values.dtype)))

        def body(_, carry):
            v, acc = carry
            v, diag = self._step(v, ds)
            return v, jax.tree_util.tree_map(jnp.maximum, acc, diag)

        return jax.lax.fori_loop(0, n_steps, body, init)

    def stability_bound(self, values: chex.Array) -> float:
        """Largest admissible ds, 0.5 / ||dv||^2_inf."""
        g = float(self.gradient_sup_sq(values))
        return math.inf if g == 0.0 else NONLINEAR_STABILITY / g

    def _check(self, diagnostics: StepDiagnostics, reference_energy: float) -> bool:
        post = float(diagnostics.post_retract_defect)
        if post > POST_RETRACT_TOLERANCE:
            raise ConstraintViolation(
                f"retraction left the map {post:.3e} off the target "
                f"(pre-retract defect {float(diagnostics.pre_retract_defect):.3e})")
        return float(diagnostics.energy_rise) <= ENERGY_TOLERANCE * max(reference_energy, 1e-300)

    def heat_step(self, v: MapField, ds: float) -> MapField:
        """One ETDRK2 step followed by retraction.

        Args:
        - `v`: current map
        - `ds`: step size, at most 0.5 / ||dv||^2_inf

        Returns:
        - (MapField): map after the step
        """
        if not ds > 0:
            raise StabilityError(f"ds must be positive, got {ds}")
        bound = self.stability_bound(v.values)
        if ds > bound:
            raise StabilityError(f"ds={ds:.4e} exceeds the nonlinear stability bound {bound:.4e}")
        values, diagnostics = self._step(v.values, jnp.asarray(ds, dtype=jnp.float64))
        if not self._check(diagnostics, float(self.energy(v.values))):
            warnings.warn(f"heat step raised the energy by {float(diagnostics.energy_rise):.3e}")
        return v.replace(values=values)

    def evolve(self, v: MapField, s: float, n_steps: int) -> MapField:
        """Advances v by heat time s with n_steps equal steps (used for self-convergence studies)."""
        ds = s / n_steps
        bound = self.stability_bound(v.values)
        if ds > bound:
            raise StabilityError(f"ds={ds:.4e} exceeds the nonlinear stability bound {bound:.4e}")
        values, diagnostics = self._advance(v.values, jnp.asarray(ds, dtype=jnp.float64), n_steps)
        self._check(diagnostics, float(self.energy(v.values)))
        return v.replace(values=values)

    def _substeps(self, values: chex.Array, interval: float) -> int:
        ds = self.stability_fraction * self.stability_bound(values)
        if self.max_ds is not None:
            ds = min(ds, self.max_ds)
        return max(1, int(math.ceil(interval / ds))) if math.isfinite(ds) else 1

    def heat_solve(self, u: MapField, s_max: Optional[float] = None, tol_Q: float = 1e-6,
                   s_levels: Optional[np.ndarray] = None) -> HeatTrajectory:
        """Solves the heat flow from u up to s_max on the default level grid.

        Non-convergence is flagged on the trajectory, not raised.

        Args:
        - `u`: initial map
        - `s_max`: (optional) final heat time, defaults to 64 / xi_min^2
        - `tol_Q`: convergence tolerance for sup_x |v(s_max) - Q_inf|
        - `s_levels`: (optional) explicit level grid, overrides s_max

        Returns:
        - (HeatTrajectory): sampled solution with convergence metadata
        """
        if s_levels is None:
            s_max = default_s_max(self.grid) if s_max is None else s_max
            s_levels = heat_levels(s_max, s_min=self.grid.dx ** 2)
        chex.assert_tree_all_finite(u.values)
        s_levels = np.asarray(s_levels, dtype=np.float64)
        if s_levels[0] != 0.0 or np.any(np.diff(s_levels) <= 0):
            raise StabilityError("s-levels must start at 0 and increase strictly")

        e0 = float(self.energy(u.values))
        within_smallness = e0 <= self.smallness
        if not within_smallness:
            warnings.warn(f"initial energy {e0:.4e} exceeds the smallness threshold {self.smallness}")

        Q = jnp.asarray(self.target.base_point)
        values = u.values
        states, energies, tensions, sup_q, defects, substeps = [values], [e0], [], [], [], [0]
        monotone = True
        for level in range(1, len(s_levels)):
            interval = float(s_levels[level] - s_levels[level - 1])
            n_steps = self._substeps(values, interval)
            values, diagnostics = self._advance(values, jnp.asarray(interval / n_steps), n_steps)
            monotone &= self._check(diagnostics, e0)
            states.append(values)
            energies.append(float(self.energy(values)))
            substeps.append(n_steps)
            if energies[-1] > energies[-2] + ENERGY_TOLERANCE * max(e0, 1e-300):
                monotone = False
            if self.verbose:
                log_metrics('heat level', level, {'s': s_levels[level], 'energy': energies[-1], 'substeps': n_steps})

        states = jnp.stack(states)
        for level_values in states:
            tensions.append(float(self.tension_sq(level_values)))
            sup_q.append(float(jnp.max(jnp.linalg.norm(level_values - Q, axis=-1))))
            defects.append(float(jnp.max(self.target.distance_to_manifold(level_values))))

        limit_point = self.target._retract(jnp.mean(states[-1], axis=(0, 1)))
        sup_dist_limit = float(jnp.max(jnp.linalg.norm(states[-1] - limit_point, axis=-1)))
        return HeatTrajectory(
            grid=self.grid,
            target=self.target,
            s_levels=jnp.asarray(s_levels),
            states=states,
            energies=jnp.asarray(energies),
            tension_sq=jnp.asarray(tensions),
            sup_dist_Q=jnp.asarray(sup_q),
            constraint_defect=jnp.asarray(defects),
            substeps=jnp.asarray(substeps),
            limit_point=limit_point,
            sup_dist_limit=sup_dist_limit,
            converged_to_Q=bool(sup_dist_limit <= tol_Q),
            energy_monotone=bool(monotone),
            within_smallness=bool(within_smallness),
        )

    def energy_dissipation_residual(self, traj: HeatTrajectory) -> chex.Array:
        """Per interval, |E(s_l) - E(s_{l+1}) - int ||tau||^2 ds| relative to E(0), trapezoid in s.
        dE/ds = -||tau(v)||^2 along the flow."""
        drop = traj.energies[:-1] - traj.energies[1:]
        ds = jnp.diff(traj.s_levels)
        dissipated = 0.5 * ds * (traj.tension_sq[1:] + traj.tension_sq[:-1])
        return jnp.abs(drop - dissipated) / jnp.maximum(traj.energies[0], 1e-300)

    @partial(jax.jit, static_argnums=(0,))
    def intrinsic_tension(self, values: chex.Array) -> chex.Array:
        """Tension of a map into a product of unit spheres in block form,
        tau_b = Laplacian v_b + |dv_b|^2 v_b, without the tangent projection."""
        split = self.target._split
        d1, d2 = self.grid.gradient(values)
        density = jnp.sum(split(d1) ** 2 + split(d2) ** 2, axis=-1, keepdims=True)
        return self.target._join(split(self.grid.laplacian(values)) + density * split(values))

    def intrinsic_extrinsic_defect(self, values: chex.Array) -> chex.Array:
        """sup_x |tau_b(v) - P_v(Laplacian v)|: the block form of the tension against the projected
        extrinsic Laplacian."""
        return jnp.max(jnp.abs(self.intrinsic_tension(values) - self.tension(values)))


def save_trajectory(traj: HeatTrajectory, directory: str) -> None:
    """Writes one field dump per level and an index CSV (level, s, energy, sup_dist_Q)."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for level in range(traj.n_levels):
        write_field_dump(os.path.join(directory, f"level_{level:04d}.bin"), traj.grid, traj.states[level])
        rows.append((level, float(traj.s_levels[level]), float(traj.energies[level]), float(traj.sup_dist_Q[level])))
    write_table(os.path.join(directory, 'index.csv'), rows, ['level', 's', 'energy', 'sup_dist_Q'])
