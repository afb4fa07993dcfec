import math

import jax.numpy as jnp
import numpy as np
import pytest

from core.errors import CaloricError, FitError, FrameError, SLConstraintViolation, SLStabilityError
from core.gauge.time_series import gauge_for_time_series
from core.heatflow.heat import HarmonicMapHeatFlow, default_s_max, heat_levels
from core.slflow.monitors import (asymptotic_decay_check, gauged_residual, helix_phase_error, mass_growth,
                                  self_convergence_order, tension_growth_rate)
from core.slflow.schrodinger import SchrodingerMapFlow, helix_period, helix_solution, save_series
from core.types import MapField, constant_map


@pytest.fixture(scope='module')
def helix_run(grid16):
    theta, mode = 1.0, 1
    flow = SchrodingerMapFlow(grid16, helix_solution(grid16, theta, mode).target)
    T = helix_period(grid16, theta, mode)
    series = flow.sl_solve(helix_solution(grid16, theta, mode), T, flow.dt_max, sample_every=200,
                           point=jnp.array([1.0, 0.0, 0.0]))
    return {'theta': theta, 'mode': mode, 'flow': flow, 'series': series}


@pytest.fixture(scope='module')
def sl_gauge(grid16, sphere, smooth_map):
    flow = SchrodingerMapFlow(grid16, sphere)
    series = flow.sl_solve(smooth_map(grid16, sphere, 0.05), 4 * flow.dt_max, flow.dt_max, sample_every=1)
    heat = HarmonicMapHeatFlow(grid16, sphere)
    levels = heat_levels(default_s_max(grid16), grid16.dx ** 2)
    return series, gauge_for_time_series(heat, series.maps(), series.sample_dt, levels)


class TestHelix:
    def test_closed_form_at_time_zero(self, grid16):
        u = helix_solution(grid16, 0.5, 2)
        np.testing.assert_allclose(np.linalg.norm(np.asarray(u.values), axis=-1), 1.0, atol=1e-15)
        np.testing.assert_allclose(np.asarray(u.values[..., 0]), math.cos(0.5))

    def test_phase_follows_closed_form(self, helix_run):
        series = helix_run['series']
        assert series.n_samples > 10
        assert series.completed
        assert helix_phase_error(series, helix_run['theta'], helix_run['mode']).max() < 1e-4

    def test_energy_is_conserved(self, helix_run):
        assert helix_run['series'].relative_energy_drift() < 1e-8

    def test_distance_is_constant(self, helix_run):
        report = asymptotic_decay_check(helix_run['series'])
        assert report.constant
        assert report.assertable == (helix_run['series'].n_samples >= 16)

    def test_matches_exact_solution_at_the_end(self, helix_run, grid16):
        series = helix_run['series']
        exact = helix_solution(grid16, helix_run['theta'], helix_run['mode'], float(series.t_grid[-1]))
        assert float(jnp.max(jnp.abs(series.states[-1] - exact.values))) < 1e-4

    def test_constraint_is_held(self, helix_run):
        assert helix_run['series'].constraint_series.max() < 1e-9


class TestSchrodingerFlow:
    def test_constant_map_energy_and_mass(self, grid16, sphere):
        flow = SchrodingerMapFlow(grid16, sphere)
        other = np.array([1.0, 0.0, 0.0])
        values = jnp.broadcast_to(jnp.asarray(other), (16, 16, 3))
        assert float(flow.energy(values)) == pytest.approx(0.0, abs=1e-20)
        expected = 0.5 * np.sum((other - sphere.base_point) ** 2) * (2 * math.pi) ** 2
        assert float(flow.mass(values, jnp.asarray(sphere.base_point))) == pytest.approx(expected)

    def test_constant_map_is_stationary(self, grid16, sphere):
        flow = SchrodingerMapFlow(grid16, sphere)
        u = constant_map(grid16, sphere)
        np.testing.assert_allclose(np.asarray(flow.evolve(u, flow.dt_max, 5).values), np.asarray(u.values),
                                   atol=1e-14)

    def test_time_reversal(self, grid16, sphere, smooth_map):
        flow = SchrodingerMapFlow(grid16, sphere)
        assert flow.time_reversal_error(smooth_map(grid16, sphere, 0.05), flow.dt_max, 20) < 1e-6

    def test_step_size_checks(self, grid16, sphere):
        flow = SchrodingerMapFlow(grid16, sphere)
        u = constant_map(grid16, sphere)
        with pytest.raises(SLStabilityError):
            flow.sl_step(u, 2 * flow.dt_max)
        with pytest.raises(SLStabilityError):
            flow.sl_step(u, 0.0)
        with pytest.raises(SLStabilityError):
            flow.sl_solve(u, 0.0, flow.dt_max)

    def test_dt_shrinks_to_hit_final_time(self, grid16, sphere):
        flow = SchrodingerMapFlow(grid16, sphere)
        series = flow.sl_solve(constant_map(grid16, sphere), 2.5 * flow.dt_max, flow.dt_max)
        assert series.t_grid[-1] == pytest.approx(2.5 * flow.dt_max)
        assert series.dt <= flow.dt_max

    def test_failure_keeps_last_good_sample(self, grid16, sphere, smooth_map, tmp_path):
        flow = SchrodingerMapFlow(grid16, sphere)
        calls = []

        def failing_check(diagnostics, reference_energy):
            calls.append(reference_energy)
            if len(calls) > 1:
                raise SLConstraintViolation('forced failure')

        flow._check = failing_check
        with pytest.raises(SLConstraintViolation) as info:
            flow.sl_solve(smooth_map(grid16, sphere, 0.05), 5 * flow.dt_max, flow.dt_max, sample_every=1,
                          checkpoint_dir=str(tmp_path))
        last_good = info.value.last_good
        assert isinstance(info.value, CaloricError)
        assert not last_good.completed
        assert last_good.n_samples == 2
        assert (tmp_path / 'checkpoint_00001.bin').exists()

    def test_save_series(self, helix_run, tmp_path):
        series = helix_run['series']
        path = tmp_path / 'sl' / 'series.csv'
        save_series(series, str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == 't,energy,mass,supdist_Q,residual'
        assert len(lines) == series.n_samples + 1

    def test_helix_mass_is_conserved(self, helix_run):
        growth = mass_growth(helix_run['series'])
        assert growth.bounded
        assert growth.bound > 0
        assert growth.rate < 1e-6 * growth.bound

    def test_mass_moves_within_its_bound_on_the_torus(self, grid16, torus):
        x1, _ = grid16.mesh
        frame = np.asarray(torus.reference_frame)
        X = (0.3 * np.cos(x1))[..., None] * frame[0] + (0.1 * np.cos(x1))[..., None] * frame[1]
        u = MapField(grid=grid16, target=torus, values=torus.exp_map(jnp.asarray(torus.base_point), jnp.asarray(X)))
        flow = SchrodingerMapFlow(grid16, torus)
        series = flow.sl_solve(u, 40 * flow.dt_max, flow.dt_max, sample_every=4)
        growth = mass_growth(series)
        assert np.ptp(series.mass_series) > 1e-6
        assert growth.rate > 0
        assert growth.bounded
        assert growth.rate <= growth.bound
        assert abs(growth.fitted_rate) <= growth.rate * (1 + 1e-9)
        jumped = series.replace(mass_series=series.mass_series + 2 * growth.bound * np.asarray(series.t_grid))
        assert not mass_growth(jumped).bounded

    def test_tension_rate_needs_nonzero_tension(self, grid16, sphere):
        flow = SchrodingerMapFlow(grid16, sphere)
        series = flow.sl_solve(constant_map(grid16, sphere), 3 * flow.dt_max, flow.dt_max)
        with pytest.raises(FitError):
            tension_growth_rate(series)

    def test_tension_rate_of_helix_is_flat(self, helix_run):
        assert abs(tension_growth_rate(helix_run['series']).slope) < 1e-6

    @pytest.mark.slow
    def test_third_order_in_time(self, grid16, sphere, smooth_map):
        flow = SchrodingerMapFlow(grid16, sphere)
        order = self_convergence_order(flow, smooth_map(grid16, sphere, 0.3), 0.05)
        assert 2.6 < order < 3.3

    @pytest.mark.slow
    @pytest.mark.parametrize('target_name', ['sphere', 'product', 'torus'])
    def test_energy_drift_over_unit_time(self, target_name, grid16, smooth_map, request):
        target = request.getfixturevalue(target_name)
        flow = SchrodingerMapFlow(grid16, target)
        series = flow.sl_solve(smooth_map(grid16, target, 0.05), 1.0, flow.dt_max, sample_every=40)
        assert series.completed
        assert series.relative_energy_drift() < 1e-6


class TestTimeGauge:
    def test_static_series_has_no_time_fields(self, grid16, sphere, smooth_map):
        u = smooth_map(grid16, sphere, 0.05)
        heat = HarmonicMapHeatFlow(grid16, sphere)
        levels = heat_levels(default_s_max(grid16), grid16.dx ** 2)
        gauge = gauge_for_time_series(heat, [u, u, u], 0.01, levels)
        assert gauge.psi.shape[0] == 1
        np.testing.assert_array_equal(np.asarray(gauge.psi_t), 0.0)
        np.testing.assert_array_equal(np.asarray(gauge.A_t), 0.0)
        assert np.isnan(gauge.fd_error)

    def test_needs_three_times(self, grid16, sphere):
        heat = HarmonicMapHeatFlow(grid16, sphere)
        u = constant_map(grid16, sphere)
        with pytest.raises(FrameError):
            gauge_for_time_series(heat, [u, u], 0.01, heat_levels(64.0, grid16.dx ** 2))
        with pytest.raises(FrameError):
            gauge_for_time_series(heat, [u, u, u], 0.0, heat_levels(64.0, grid16.dx ** 2))

    def test_gauged_equation_holds(self, sl_gauge):
        series, gauge = sl_gauge
        residual = gauged_residual(gauge, series.target)
        assert gauge.psi.shape[0] == 3
        assert residual.equation < 1e-3 * residual.scale
        assert residual.psi_t_identity < 1e-3 * float(jnp.max(jnp.abs(gauge.psi_t)))

    def test_gauged_residual_is_second_order_in_time(self, sl_gauge, grid16, sphere, smooth_map):
        series, gauge = sl_gauge
        flow = SchrodingerMapFlow(grid16, sphere)
        half = flow.sl_solve(smooth_map(grid16, sphere, 0.05), 2 * flow.dt_max, flow.dt_max / 2, sample_every=1)
        heat = HarmonicMapHeatFlow(grid16, sphere)
        levels = heat_levels(default_s_max(grid16), grid16.dx ** 2)
        finer = gauge_for_time_series(heat, half.maps(), half.sample_dt, levels)
        coarse, fine = gauged_residual(gauge, sphere).equation, gauged_residual(finer, sphere).equation
        assert half.n_samples == series.n_samples
        assert coarse < 1e-4
        assert fine < 1e-4
        assert coarse >= 2 * fine

    def test_torsion_free_in_time(self, sl_gauge):
        _, gauge = sl_gauge
        assert np.isnan(gauge.torsion_residual[0]) and np.isnan(gauge.torsion_residual[-1])
        assert gauge.torsion_residual[1] < 1e-3 * float(jnp.max(jnp.abs(gauge.psi_t)))
        assert not gauge.t_grid_coarse

    def test_time_connection_routes_agree(self, sl_gauge):
        _, gauge = sl_gauge
        assert gauge.A_t_agreement <= 0.1 * float(jnp.max(jnp.abs(gauge.A_t))) + 1e-12

    def test_flat_target_has_no_time_connection(self, grid16, torus, smooth_map):
        flow = SchrodingerMapFlow(grid16, torus)
        series = flow.sl_solve(smooth_map(grid16, torus, 0.05), 2 * flow.dt_max, flow.dt_max, sample_every=1)
        heat = HarmonicMapHeatFlow(grid16, torus)
        gauge = gauge_for_time_series(heat, series.maps(), series.sample_dt,
                                      heat_levels(default_s_max(grid16), grid16.dx ** 2))
        assert float(jnp.max(jnp.abs(gauge.A_t))) <= 1e-12

    def test_residual_needs_three_times(self, grid16, sphere, smooth_map):
        u = smooth_map(grid16, sphere, 0.05)
        heat = HarmonicMapHeatFlow(grid16, sphere)
        gauge = gauge_for_time_series(heat, [u, u, u], 0.01, heat_levels(default_s_max(grid16), grid16.dx ** 2))
        with pytest.raises(FitError):
            gauged_residual(gauge, sphere)


def test_map_field_series_roundtrip(helix_run):
    maps = helix_run['series'].maps()
    assert isinstance(maps[0], MapField)
    assert len(maps) == helix_run['series'].n_samples
