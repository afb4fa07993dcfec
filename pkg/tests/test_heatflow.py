import math

import jax.numpy as jnp
import numpy as np
import pytest

from core.cli.config import InitialDataConfig
from core.cli.initial_data import initial_data
from core.errors import FitError, GridError, StabilityError
from core.heatflow.decay import decay_rates, derivative_norms, frequency_decay_profile, smallness_sweep
from core.heatflow.heat import HarmonicMapHeatFlow, default_s_max, heat_levels, save_trajectory
from core.slflow.schrodinger import helix_solution, helix_wavenumber
from core.spectral.grid import Grid2
from core.types import MapField, constant_map


class TestLevels:
    def test_levels_start_at_zero_and_increase(self):
        s = heat_levels(64.0, 0.04)
        assert s[0] == 0.0
        assert np.all(np.diff(s) > 0)
        assert s[-1] >= 64.0
        assert s[-2] < 64.0

    def test_eight_levels_per_dyadic_block(self):
        s = heat_levels(64.0, 0.04)
        for j in (0, 1, 2):
            inside = (s >= 2.0 ** (2 * j - 1)) & (s < 2.0 ** (2 * j + 1))
            assert int(inside.sum()) == 8

    def test_bad_range(self):
        with pytest.raises(StabilityError):
            heat_levels(0.01, 0.04)

    def test_default_s_max(self, grid16):
        assert default_s_max(grid16) == pytest.approx(64.0)


class TestHeatFlow:
    def test_constant_map_is_stationary(self, grid16, sphere):
        flow = HarmonicMapHeatFlow(grid16, sphere)
        u = constant_map(grid16, sphere)
        assert flow.stability_bound(u.values) == math.inf
        v = flow.heat_step(u, 0.1)
        np.testing.assert_allclose(np.asarray(v.values), np.asarray(u.values), atol=1e-12)

    def test_constant_map_trajectory(self, constant_bundle):
        traj = constant_bundle['traj']
        assert traj.converged_to_Q
        assert traj.sup_dist_limit < 1e-12
        np.testing.assert_allclose(np.asarray(traj.energies), 0.0, atol=1e-20)

    def test_step_size_checks(self, grid16, sphere, smooth_map):
        flow = HarmonicMapHeatFlow(grid16, sphere)
        u = smooth_map(grid16, sphere, 0.3)
        with pytest.raises(StabilityError):
            flow.heat_step(u, 0.0)
        with pytest.raises(StabilityError):
            flow.heat_step(u, 2 * flow.stability_bound(u.values))

    def test_trajectory_invariants(self, sphere_bundle):
        traj = sphere_bundle['traj']
        energies = np.asarray(traj.energies)
        assert traj.converged_to_Q
        assert traj.energy_monotone
        assert traj.within_smallness
        assert np.all(np.diff(energies) <= 1e-8 * energies[0])
        assert float(jnp.max(traj.constraint_defect)) < 1e-10
        assert energies[-1] < 1e-12 * energies[0]

    def test_sup_distance_matches_map_field(self, sphere_bundle):
        traj = sphere_bundle['traj']
        Q = jnp.asarray(traj.target.base_point)
        assert float(traj.sup_dist_Q[3]) == pytest.approx(traj.state(3).sup_distance(Q))

    def test_energy_dissipation(self, sphere_bundle):
        flow, traj = sphere_bundle['flow'], sphere_bundle['traj']
        assert float(jnp.max(flow.energy_dissipation_residual(traj))) < 1e-2

    @pytest.mark.parametrize('bundle', ['sphere_bundle', 'product_bundle', 'torus_bundle'])
    def test_block_tension_matches_projected_laplacian(self, bundle, request):
        flow, u = request.getfixturevalue(bundle)['flow'], request.getfixturevalue(bundle)['u']
        assert float(flow.intrinsic_extrinsic_defect(u.values)) < 1e-10
        normal = flow.grid.laplacian(u.values) - flow.tension(u.values)
        assert float(jnp.max(jnp.abs(normal))) > 1e-4

    def test_block_tension_of_helix(self, grid16):
        theta, mode = 0.7, 2
        u = helix_solution(grid16, theta, mode)
        flow = HarmonicMapHeatFlow(grid16, u.target)
        tau = np.asarray(flow.intrinsic_tension(u.values))
        k = helix_wavenumber(grid16, mode)
        np.testing.assert_allclose(tau[..., 0], k ** 2 * math.sin(theta) ** 2 * math.cos(theta), atol=1e-12)
        np.testing.assert_allclose(np.sum(tau * np.asarray(u.values), axis=-1), 0.0, atol=1e-12)

    def test_explicit_levels_must_start_at_zero(self, grid16, sphere):
        flow = HarmonicMapHeatFlow(grid16, sphere)
        with pytest.raises(StabilityError):
            flow.heat_solve(constant_map(grid16, sphere), s_levels=np.array([0.1, 0.2, 0.4]))

    def test_short_run_is_not_converged(self, grid16, sphere, smooth_map):
        flow = HarmonicMapHeatFlow(grid16, sphere)
        traj = flow.heat_solve(smooth_map(grid16, sphere, 0.05), s_max=0.5)
        assert not traj.converged_to_Q
        assert traj.s_max >= 0.5

    def test_rejects_nonfinite_data(self, grid16, sphere):
        flow = HarmonicMapHeatFlow(grid16, sphere)
        values = jnp.asarray(constant_map(grid16, sphere).values).at[0, 0, 0].set(jnp.nan)
        with pytest.raises(AssertionError):
            flow.heat_solve(MapField(grid=grid16, target=sphere, values=values))

    def test_save_trajectory(self, tmp_path, constant_bundle):
        traj = constant_bundle['traj']
        save_trajectory(traj, str(tmp_path / 'heat'))
        assert (tmp_path / 'heat' / 'level_0000.bin').exists()
        assert len((tmp_path / 'heat' / 'index.csv').read_text().splitlines()) == traj.n_levels + 1

    @pytest.mark.slow
    def test_second_order_in_s(self, grid16, sphere, smooth_map):
        flow = HarmonicMapHeatFlow(grid16, sphere)
        u = smooth_map(grid16, sphere, 0.3)
        runs = [np.asarray(flow.evolve(u, 0.2, n).values) for n in (10, 20, 40)]
        order = math.log2(np.max(np.abs(runs[0] - runs[1])) / np.max(np.abs(runs[1] - runs[2])))
        assert 1.7 < order < 2.3


class TestDecay:
    def test_rate_order_checked(self, sphere_bundle):
        with pytest.raises(FitError):
            decay_rates(sphere_bundle['traj'], 4)

    def test_rate_needs_samples(self, sphere_bundle):
        with pytest.raises(FitError):
            decay_rates(sphere_bundle['traj'], 1, window=(1.0, 1.1))

    def test_rate_needs_converged_trajectory(self, grid16, sphere, smooth_map):
        traj = HarmonicMapHeatFlow(grid16, sphere).heat_solve(smooth_map(grid16, sphere, 0.05), s_max=0.5)
        with pytest.raises(FitError, match='not converged'):
            decay_rates(traj, 1)

    def test_energy_slope_is_flat(self, sphere, smooth_map):
        grid = Grid2(64, 2 * math.pi)
        traj = HarmonicMapHeatFlow(grid, sphere).heat_solve(smooth_map(grid, sphere, 0.05))
        rate = decay_rates(traj, 0)
        assert rate.expected == 0.0
        assert rate.n_samples >= 5
        assert -0.3 <= rate.slope <= 0.05

    @pytest.mark.parametrize('k', [0, 1, 2])
    def test_single_shell_decay_fit(self, k, sphere):
        grid = Grid2(64, 2 * math.pi)
        x1, _ = grid.mesh
        X = jnp.asarray(0.01 * np.cos(2 ** k * x1)[..., None] * sphere.reference_frame[0])
        u = MapField(grid=grid, target=sphere, values=sphere.exp_map(jnp.asarray(sphere.base_point), X))
        traj = HarmonicMapHeatFlow(grid, sphere).heat_solve(u, s_max=2.0)
        profile = frequency_decay_profile(traj, k, 1.0)
        assert profile.fit is not None
        assert profile.fit.exponent >= 1.0
        assert profile.fit.residual < 0.1
        assert profile.maximum <= 1.01 * profile.initial

    def test_derivative_norms_decrease(self, sphere_bundle):
        norms = derivative_norms(sphere_bundle['traj'], 1)
        assert norms[0] == pytest.approx(math.sqrt(2 * float(sphere_bundle['traj'].energies[0])), rel=1e-10)
        assert np.all(np.diff(norms) <= 1e-10 * norms[0])

    def test_zero_profile_for_constant_map(self, constant_bundle):
        profile = frequency_decay_profile(constant_bundle['traj'], 1, 2.0)
        assert profile.maximum < 1e-12
        assert profile.normalized == 0.0

    def test_profile_of_single_shell(self, grid32, sphere):
        x1, _ = grid32.mesh
        X = jnp.asarray(0.01 * np.cos(4 * x1)[..., None] * sphere.reference_frame[0])
        u = MapField(grid=grid32, target=sphere, values=sphere.exp_map(jnp.asarray(sphere.base_point), X))
        traj = HarmonicMapHeatFlow(grid32, sphere).heat_solve(u, s_max=2.0)
        flat = frequency_decay_profile(traj, 2, 0.0)
        assert flat.maximum <= 1.1 * flat.initial
        weighted = frequency_decay_profile(traj, 2, 1.0)
        assert weighted.maximum <= 1.1 * weighted.initial

    def test_profile_shell_checked(self, constant_bundle):
        with pytest.raises(GridError):
            frequency_decay_profile(constant_bundle['traj'], 12, 1.0)

    @pytest.mark.slow
    def test_parabolic_rates_for_scale_free_data(self, sphere):
        grid = Grid2(64, 2 * math.pi)
        spec = InitialDataConfig(family='random', spectrum='scale_free', amplitude=0.1, seed=3)
        traj = HarmonicMapHeatFlow(grid, sphere).heat_solve(initial_data(spec, grid, sphere))
        for j in (1, 2):
            rate = decay_rates(traj, j)
            assert abs(rate.slope - rate.expected) < 0.2

    def test_smallness_sweep(self, grid16, sphere):
        flow = HarmonicMapHeatFlow(grid16, sphere)
        data_fn = lambda energy: initial_data(InitialDataConfig(family='random', amplitude=math.sqrt(2 * energy)),
                                              grid16, sphere)
        rows = smallness_sweep(flow, data_fn, [1e-4, 4e-4])
        assert len(rows) == 2
        assert rows[0]['energy'] < rows[1]['energy']
        assert rows[0]['energy'] == pytest.approx(1e-4, rel=0.05)
        assert all(row['energy_monotone'] == 1.0 for row in rows)
