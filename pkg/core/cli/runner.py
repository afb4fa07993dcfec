import hashlib
import json
import math
import os
import time
from importlib import metadata
from typing import Any, Dict, List, Optional

import jax.numpy as jnp
import numpy as np
import wandb

from core.cli.config import RunConfig
from core.cli.initial_data import gradient_norm, initial_data, tangent_bump
from core.common import log_metrics
from core.diagnostics.envelopes import envelope_family, envelope_iterate, envelope_rows, field_envelope, MAX_ITERATE
from core.errors import CaloricError, FitError, GridError
from core.gauge.fields import build_gauge, connection_agreement, gauge_decay_profile
from core.gauge.frame import build_caloric_frame, reference_alignment
from core.gauge.identities import verify_commutator, verify_heat_tension_identity, verify_parabolic_fields, \
    verify_torsion_free
from core.gauge.separation import dynamic_separation
from core.gauge.time_series import gauge_for_time_series
from core.heatflow.decay import decay_rates, frequency_decay_profile, smallness_sweep
from core.heatflow.heat import HarmonicMapHeatFlow, default_s_max, heat_levels, save_trajectory
from core.slflow.monitors import asymptotic_decay_check, gauged_residual, helix_phase_error, mass_growth, \
    tension_growth_rate
from core.slflow.schrodinger import SchrodingerMapFlow, save_series
from core.spectral.grid import Grid2
from core.spectral.io import write_field_dump, write_table
from core.spectral.littlewood_paley import LittlewoodPaley
from core.targets.factory import make_target
from core.testing.checks import PipelineProducts, default_suite, run_suite, suite_status, summarize

MANIFEST_NAME = 'manifest.json'
TIMING_NAME = 'timing.json'
VERSIONED_PACKAGES = ('jax', 'jaxlib', 'numpy', 'optax', 'chex', 'pandas', 'pydantic')
# weight exponent of the per-shell frequency profiles
PROFILE_WEIGHT = 1.0


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = 'unknown'
    return versions


def file_checksum(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def write_json_atomic(path: str, payload: Dict) -> None:
    """Writes JSON through a temporary file and an atomic rename."""
    tmp = f"{path}.tmp"
    with open(tmp, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')
    os.replace(tmp, path)


def _finite(value: float) -> Optional[float]:
    value = float(value)
    return value if math.isfinite(value) else None


class Runner:
    """Runs the configured pipeline (heat flow, caloric gauge, Schrodinger map flow, diagnostics),
    writes every output below the run directory and finishes with a manifest.

    Stages run in order and share their products; a module error stops the pipeline, is recorded
    in the manifest and makes the status nonzero.
    """

    def __init__(self, config: RunConfig, verbose: bool = True, wandb_run: Optional[Any] = None):
        """
        Args:
        - `config`: validated run configuration
        - `verbose`: print one line per stage
        - `wandb_run`: (optional) wandb run to continue logging to, else one is initialised
          when `output.wandb_project` is set
        """
        self.config = config
        self.verbose = verbose
        self.out_dir = config.output.directory
        self.grid = Grid2(config.grid.n, config.grid.side_length)
        self.target = make_target(config.target.kind)
        numerics = config.numerics
        self.heat_flow = HarmonicMapHeatFlow(self.grid, self.target, smallness=numerics.smallness,
                                             stability_fraction=numerics.stability_fraction)
        self.sl_flow = SchrodingerMapFlow(self.grid, self.target)
        self.files: List[str] = []
        self.summary: Dict[str, Optional[float]] = {}
        self.timing: Dict[str, float] = {}
        self.products = PipelineProducts(flat=self.target.name == 'flat_torus2')
        self.use_wandb = config.output.wandb_project != ''
        if self.use_wandb:
            self.run_handle = wandb_run if wandb_run is not None else self.init_wandb(config.output.wandb_project)
        else:
            self.run_handle = None

    def init_wandb(self, project_name: str):
        """Initializes a wandb run with the run configuration."""
        return wandb.init(project=project_name, config=self.get_config())

    def get_config(self) -> Dict:
        return {
            'run': self.config.model_dump(mode='json'),
            'heat_flow': self.heat_flow.get_config(),
            'sl_flow': self.sl_flow.get_config(),
        }

    # ---- bookkeeping ----

    def _path(self, *parts: str) -> str:
        path = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def _track(self, path: str) -> str:
        self.files.append(os.path.relpath(path, self.out_dir))
        return path

    def _track_directory(self, directory: str) -> None:
        for name in sorted(os.listdir(directory)):
            self._track(os.path.join(directory, name))

    def _record(self, stage: str, metrics: Dict[str, float]) -> None:
        for key, value in metrics.items():
            self.summary[f"{stage}/{key}"] = _finite(value)
        if self.verbose:
            log_metrics(stage, len(self.timing), metrics, use_wandb=self.use_wandb)

    def _timed(self, stage: str, fn) -> None:
        start = time.perf_counter()
        fn()
        self.timing[stage] = time.perf_counter() - start

    # ---- stages ----

    def run_initial_data(self) -> None:
        self.u0 = initial_data(self.config.initial_data, self.grid, self.target)
        self._record('initial_data', {
            'energy': self.heat_flow.energy(self.u0.values),
            'gradient_norm': gradient_norm(self.u0),
            'constraint_defect': self.u0.constraint_defect(),
        })

    def run_envelopes(self) -> None:
        diagnostics = self.config.diagnostics
        lp = LittlewoodPaley(self.grid)
        if diagnostics.iterates:
            base = envelope_family(lp, self.u0.values, diagnostics.delta)
            families = [base] + [envelope_iterate(base, j) for j in range(1, MAX_ITERATE + 1)]
            rows = [row for family in families for row in envelope_rows(family)]
        else:
            rows = []
            for sigma in diagnostics.sigmas:
                env = field_envelope(lp, self.u0.values, sigma, diagnostics.delta)
                rows += [(int(k), float(sigma), float(v), diagnostics.delta, 0) for k, v in zip(env.shells, env.values)]
        write_table(self._track(self._path('envelopes.csv')), rows, ['k', 'sigma', 'value', 'delta', 'iterate_j'])
        gamma0 = field_envelope(lp, self.u0.values, 0.0, diagnostics.delta)
        self._record('envelopes', {'ell2_sigma0': gamma0.ell2_norm, 'rows': len(rows)})

    def run_heat(self) -> None:
        numerics = self.config.numerics
        traj = self.heat_flow.heat_solve(self.u0, s_max=numerics.s_max, tol_Q=numerics.tol_Q)
        self.products = self.products.replace(trajectory=traj)
        rows = zip(range(traj.n_levels), np.asarray(traj.s_levels), np.asarray(traj.energies),
                   np.asarray(traj.tension_sq), np.asarray(traj.sup_dist_Q), np.asarray(traj.constraint_defect))
        write_table(self._track(self._path('heat_levels.csv')), list(rows),
                    ['level', 's', 'energy', 'tension_sq', 'sup_dist_Q', 'constraint_defect'])
        if self.config.output.save_trajectory:
            directory = os.path.join(self.out_dir, 'trajectory')
            save_trajectory(traj, directory)
            self._track_directory(directory)
        self._record('heat', {
            'energy_initial': traj.energies[0],
            'energy_final': traj.energies[-1],
            'energy_monotone': float(traj.energy_monotone),
            'converged_to_Q': float(traj.converged_to_Q),
            'sup_dist_limit': traj.sup_dist_limit,
            'within_smallness': float(traj.within_smallness),
            'dissipation_residual': jnp.max(self.heat_flow.energy_dissipation_residual(traj)),
            'tension_forms': self.heat_flow.intrinsic_extrinsic_defect(self.u0.values),
        })
        if self.config.diagnostics.decay_fits:
            self.run_decay_fits()
        if self.config.diagnostics.epsilon_sweep:
            self.run_epsilon_sweep()

    def run_decay_fits(self) -> None:
        traj = self.products.trajectory
        rows, metrics = [], {}
        for j in range(4):
            try:
                rate = decay_rates(traj, j)
                rows.append((j, rate.slope, rate.expected, rate.window[0], rate.window[1], rate.n_samples))
                metrics[f"slope_j{j}"] = rate.slope
            except FitError:
                rows.append((j, float('nan'), -j / 2, float('nan'), float('nan'), 0))
        write_table(self._track(self._path('decay_rates.csv')), rows,
                    ['j', 'slope', 'expected', 's_lo', 's_hi', 'n_samples'])
        profile_rows = []
        for k in self.config.diagnostics.decay_shells:
            try:
                profile = frequency_decay_profile(traj, k, PROFILE_WEIGHT, self.config.diagnostics.delta)
            except (GridError, FitError):
                continue
            fitted = profile.fit.exponent if profile.fit is not None else float('nan')
            residual = profile.fit.residual if profile.fit is not None else float('nan')
            profile_rows.append((k, profile.M, profile.maximum, profile.normalized, fitted, residual))
            metrics[f"fitted_M_k{k}"] = fitted
        if profile_rows:
            write_table(self._track(self._path('frequency_profiles.csv')), profile_rows,
                        ['k', 'M', 'maximum', 'normalized', 'fitted_M', 'fit_residual'])
        self._record('decay', metrics)

    def run_epsilon_sweep(self) -> None:
        spec = self.config.initial_data
        if spec.family == 'bump':
            unit = gradient_norm(self.u0.replace(values=tangent_bump(self.grid, self.target, 1.0, spec.width, spec.center)))
            amplitude = lambda energy: math.sqrt(2.0 * energy) / unit
        else:
            amplitude = lambda energy: math.sqrt(2.0 * energy)
        data_fn = lambda energy: initial_data(spec.model_copy(update={'amplitude': amplitude(energy)}),
                                              self.grid, self.target)
        rows = smallness_sweep(self.heat_flow, data_fn, self.config.diagnostics.epsilon_sweep,
                               tol_Q=self.config.numerics.tol_Q, s_max=self.config.numerics.s_max,
                               verbose=self.verbose)
        columns = list(rows[0].keys())
        write_table(self._track(self._path('epsilon_sweep.csv')), [list(r.values()) for r in rows], columns)

    def run_gauge(self) -> None:
        traj = self.products.trajectory
        frame = build_caloric_frame(traj)
        gauge = build_gauge(traj, frame)
        separation = dynamic_separation(gauge)
        self.products = self.products.replace(frame=frame, gauge=gauge, separation=separation)
        torsion = verify_torsion_free(gauge)
        commutator = verify_commutator(gauge)
        heat_tension = verify_heat_tension_identity(gauge)
        rows = zip(range(traj.n_levels), np.asarray(traj.s_levels), torsion.per_level, commutator.per_level,
                   heat_tension.per_level, np.asarray(jnp.max(jnp.abs(gauge.A), axis=(1, 2, 3, 4, 5))),
                   separation.separation_residual)
        write_table(self._track(self._path('gauge_levels.csv')), list(rows),
                    ['level', 's', 'torsion', 'commutator', 'heat_tension', 'A_sup', 'separation_residual'])
        profile = gauge_decay_profile(gauge)
        if self.config.output.save_trajectory:
            self.write_gauge_dumps(gauge, {'torsion': torsion.sup, 'commutator': commutator.sup})
        metrics = {
            'frame_orthonormality': frame.orthonormality_defect,
            'reference_alignment': reference_alignment(self.target, frame),
            'two_route': connection_agreement(gauge),
            'torsion': torsion.sup,
            'commutator': commutator.sup,
            'heat_tension': heat_tension.sup,
            'parabolic_fields': verify_parabolic_fields(gauge).sup,
            'A_tail': jnp.max(jnp.abs(gauge.A[-1])),
            'separation_residual': np.max(separation.separation_residual),
            'separation_spread': separation.gamma_inf_spread,
            'nested_residual': separation.nested_residual,
        }
        metrics.update({f"slope_{name}": value for name, value in profile.slopes.items()})
        self._record('gauge', metrics)

    def write_gauge_dumps(self, gauge, residuals: Dict[str, float]) -> None:
        rows = []
        n = self.grid.n
        for level in (0, gauge.s_levels.shape[0] - 1):
            for name in ('psi', 'psi_s', 'A'):
                field = getattr(gauge, name)[level].reshape(n, n, -1)
                relative = os.path.join('gauge', f"{name}_level_{level:04d}.bin")
                write_field_dump(self._track(self._path(relative)), self.grid, field)
                rows.append((name, level, relative, residuals['torsion'], residuals['commutator']))
        write_table(self._track(self._path('gauge', 'index.csv')), rows,
                    ['quantity', 's_level', 'file', 'torsion_sup', 'commutator_sup'])

    def run_sl(self) -> None:
        numerics = self.config.numerics
        dt = numerics.dt if numerics.dt is not None else self.sl_flow.dt_max
        checkpoint_dir = os.path.join(self.out_dir, 'checkpoints') if numerics.checkpoint_every else None
        series = self.sl_flow.sl_solve(self.u0, numerics.T, dt, sample_every=numerics.sample_every,
                                       checkpoint_dir=checkpoint_dir, checkpoint_every=numerics.checkpoint_every)
        if checkpoint_dir is not None and os.path.isdir(checkpoint_dir):
            self._track_directory(checkpoint_dir)
        self.products = self.products.replace(series=series)
        decay = asymptotic_decay_check(series)
        growth = mass_growth(series)
        metrics = {
            'energy_drift': series.relative_energy_drift(),
            'constraint': np.max(series.constraint_series),
            'mass_growth_rate': growth.rate,
            'mass_growth_bound': growth.bound,
            'supdist_final': series.supdist_series[-1],
            'decay_trend': decay.trend,
            'decay_nonincreasing': float(decay.nonincreasing),
        }
        try:
            metrics['tension_growth'] = tension_growth_rate(series).slope
        except FitError:
            metrics['tension_growth'] = float('nan')
        spec = self.config.initial_data
        if spec.family == 'helix':
            metrics['helix_phase_error'] = np.max(helix_phase_error(series, spec.theta, spec.mode))
        self._record('sl', metrics)

    def run_time_gauge(self) -> None:
        series = self.products.series
        count = min(self.config.numerics.gauge_times, series.n_samples)
        s_max = self.config.numerics.s_max or default_s_max(self.grid)
        s_levels = heat_levels(s_max, s_min=self.grid.dx ** 2)
        time_gauge = gauge_for_time_series(self.heat_flow, series.maps()[:count], series.sample_dt, s_levels,
                                           tol_Q=self.config.numerics.tol_Q)
        gauged = gauged_residual(time_gauge, self.target)
        self.products = self.products.replace(gauged=gauged)
        residual = np.full(series.n_samples, np.nan)
        residual[2:count - 2] = gauged.equation_per_t
        save_series(series, self._track(self._path('sl_series.csv')), residual)
        self._record('time_gauge', {
            'A_t_agreement': time_gauge.A_t_agreement,
            'torsion': np.nanmax(time_gauge.torsion_residual),
            't_grid_coarse': float(time_gauge.t_grid_coarse),
            'gauged_equation': gauged.equation,
            'gauged_psi_t': gauged.psi_t_identity,
            'curvature_term': gauged.curvature_term,
        })

    def run_checks(self) -> int:
        results = run_suite(default_suite(), self.products, verbose=self.verbose, use_wandb=self.use_wandb)
        self.checks = [{'name': r.name, 'value': _finite(r.value), 'tolerance': r.tolerance,
                        'passed': r.passed, 'fatal': r.fatal} for r in results]
        self.summary.update({k: _finite(v) for k, v in summarize(results).items()})
        return suite_status(results)

    # ---- orchestration ----

    def run(self) -> Dict:
        """Runs every configured stage and writes the manifest.

        Returns:
        - (Dict): the manifest, whose `status` is 0 on success and 1 on any failure
        """
        os.makedirs(self.out_dir, exist_ok=True)
        mode = self.config.flow.mode
        self.checks: List[Dict] = []
        stages = [('initial_data', self.run_initial_data)]
        if self.config.diagnostics.envelopes:
            stages.append(('envelopes', self.run_envelopes))
        if mode in ('heat', 'gauge', 'full'):
            stages.append(('heat', self.run_heat))
        if mode in ('gauge', 'full'):
            stages.append(('gauge', self.run_gauge))
        if mode in ('sl', 'full'):
            stages.append(('sl', self.run_sl))
        if mode == 'full':
            stages.append(('time_gauge', self.run_time_gauge))
        elif mode == 'sl':
            stages.append(('sl_series', lambda: save_series(self.products.series,
                                                            self._track(self._path('sl_series.csv')))))

        status, error = 0, None
        try:
            for name, stage in stages:
                self._timed(name, stage)
            if self.config.diagnostics.residual_suite:
                status = self.run_checks()
        except CaloricError as err:
            status, error = 1, str(err)
            if self.verbose:
                print(f"error: {err}")

        manifest = self.write_manifest(status, error)
        if self.use_wandb:
            self.run_handle.log({k: v for k, v in self.summary.items() if v is not None})
            self.run_handle.finish()
        return manifest

    def write_manifest(self, status: int, error: Optional[str]) -> Dict:
        """Manifest of the run: config echo, package versions, file checksums, summary scalars and
        check outcomes. Wall-clock goes to a sidecar timing file that the manifest does not list."""
        manifest = {
            'config': self.get_config(),
            'versions': package_versions(),
            'files': {rel: file_checksum(os.path.join(self.out_dir, rel)) for rel in sorted(set(self.files))},
            'summary': dict(sorted(self.summary.items())),
            'checks': self.checks,
            'status': status,
            'error': error,
        }
        write_json_atomic(os.path.join(self.out_dir, MANIFEST_NAME), manifest)
        write_json_atomic(os.path.join(self.out_dir, TIMING_NAME), {'seconds': self.timing})
        return manifest
