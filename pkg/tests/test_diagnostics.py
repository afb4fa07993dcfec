import math
from fractions import Fraction

import jax.numpy as jnp
import numpy as np
import pytest

from core.diagnostics.envelopes import (EnvelopeFamily, as_sigma, envelope_family, envelope_iterate,
                                        envelope_of_sequence, envelope_rows, envelope_sum_constant, field_envelope,
                                        iterated_value, sigma_lattice)
from core.diagnostics.fitting import decay_fit, log_log_slope
from core.diagnostics.norms import f0_norm, norm_blocks
from core.errors import EnvelopeError, FitError
from core.spectral.littlewood_paley import LittlewoodPaley


def brute_force_envelope(a, delta):
    j = np.arange(len(a))
    return np.max(np.asarray(a)[None, :] * 2.0 ** (-delta * np.abs(j[:, None] - j[None, :])), axis=1)


def oracle(values, j, sigma):
    """gamma^(j)(sigma) written out from the branch table, values keyed by Fraction"""
    if j == 0:
        return values[sigma]
    split = Fraction(99, 100) if j == 1 else Fraction(j + 3, 4)
    if sigma <= split:
        return oracle(values, j - 1, sigma)
    return values[sigma] + oracle(values, j - 1, sigma - Fraction(3, 8)) * values[Fraction(3, 8)]


def random_family(rng, n_shells=6, delta=0.25):
    lattice = sigma_lattice()
    return EnvelopeFamily(shells=np.arange(n_shells), sigmas=lattice, values=rng.random((len(lattice), n_shells)),
                          delta=delta, iterate=0)


class TestSequenceEnvelope:
    def test_spike(self):
        a = np.zeros(12)
        a[5] = 1.0
        env = envelope_of_sequence(a, delta=0.5)
        np.testing.assert_allclose(env.values, 2.0 ** (-0.5 * np.abs(np.arange(12) - 5)), rtol=1e-12)

    def test_matches_closed_form(self):
        rng = np.random.default_rng(0)
        for delta in (1 / 800, 0.1, 1.0):
            a = rng.random(20) * 10.0 ** rng.integers(-3, 3, 20)
            np.testing.assert_allclose(envelope_of_sequence(a, delta).values, brute_force_envelope(a, delta),
                                       rtol=1e-12)

    def test_dominates_and_is_idempotent(self):
        a = np.random.default_rng(1).random(15)
        env = envelope_of_sequence(a, 0.3)
        assert np.all(env.values >= a)
        np.testing.assert_array_equal(envelope_of_sequence(env.values, 0.3).values, env.values)
        assert env.slow_variation_defect() <= 1e-12

    def test_slowly_varying_sequence_is_fixed(self):
        np.testing.assert_array_equal(envelope_of_sequence(np.ones(7)).values, np.ones(7))

    def test_sum_constant(self):
        a = np.random.default_rng(2).random(30)
        r = 2.0 ** (-0.5)
        assert 1.0 <= envelope_sum_constant(a, 0.5) <= ((1 + r) / (1 - r)) ** 2
        assert envelope_sum_constant(np.zeros(4)) == 1.0

    @pytest.mark.parametrize('bad', [[1.0, -0.1], [1.0, np.nan], [1.0, np.inf]])
    def test_rejects_bad_entries(self, bad):
        with pytest.raises(EnvelopeError):
            envelope_of_sequence(bad)

    def test_rejects_bad_delta(self):
        with pytest.raises(EnvelopeError):
            envelope_of_sequence([1.0, 2.0], delta=0.0)


class TestFieldEnvelope:
    def test_constant_field_has_zero_envelope(self, grid16):
        lp = LittlewoodPaley(grid16)
        env = field_envelope(lp, jnp.ones((16, 16, 3)))
        np.testing.assert_allclose(env.values, 0.0, atol=1e-12)
        assert list(env.shells) == list(lp.shells)

    def test_sigma_weights(self, grid32):
        lp = LittlewoodPaley(grid32)
        x1, _ = grid32.mesh
        f = jnp.asarray(np.cos(4 * x1))
        low = field_envelope(lp, f, sigma=0.0, delta=1.0)
        high = field_envelope(lp, f, sigma=1.0, delta=1.0)
        index = 2 - lp.k_min
        assert high.values[index] == pytest.approx(4.0 * low.values[index])

    def test_time_axis_takes_sup(self, grid16):
        lp = LittlewoodPaley(grid16)
        x1, _ = grid16.mesh
        series = jnp.asarray(np.stack([np.cos(2 * x1), 3 * np.cos(2 * x1)]))
        env = field_envelope(lp, series, time_axis=True)
        np.testing.assert_allclose(env.values, field_envelope(lp, series[1]).values, rtol=1e-12)


class TestIterates:
    def test_sigma_lattice(self):
        assert len(sigma_lattice()) == 17
        assert as_sigma(0.375) == Fraction(3, 8)
        for bad in (0.3, '99/100', -0.125, 2.125):
            with pytest.raises(EnvelopeError):
                as_sigma(bad)

    def test_first_branch_is_the_base(self):
        family = random_family(np.random.default_rng(3))
        for j in range(1, 5):
            np.testing.assert_array_equal(iterated_value(family, j, Fraction(7, 8)), family.at(Fraction(7, 8)))

    def test_recursion_step(self):
        family = random_family(np.random.default_rng(4))
        expected = family.at('9/8') + iterated_value(family, 1, '3/4') * family.at('3/8')
        np.testing.assert_array_equal(iterated_value(family, 2, '9/8'), expected)

    def test_against_branch_table(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            family = random_family(rng, n_shells=3)
            values = dict(zip(family.sigmas, family.values))
            for j in range(1, 5):
                iterate = envelope_iterate(family, j)
                for sigma, row in zip(iterate.sigmas, iterate.values):
                    np.testing.assert_array_equal(row, oracle(values, j, sigma))

    def test_zero_family_stays_zero(self):
        family = random_family(np.random.default_rng(6)).replace(values=np.zeros((17, 6)))
        for j in range(1, 5):
            assert np.all(envelope_iterate(family, j).values == 0.0)

    def test_domain_and_order(self):
        family = random_family(np.random.default_rng(7), delta=0.5)
        first = envelope_iterate(family, 1)
        assert first.sigmas[-1] == Fraction(5, 4)
        assert first.delta == 0.25
        assert envelope_iterate(family, 4).sigmas[-1] == Fraction(2)
        with pytest.raises(EnvelopeError):
            first.at('3/2')
        with pytest.raises(EnvelopeError):
            iterated_value(family, 1, '3/2')
        with pytest.raises(EnvelopeError):
            iterated_value(family, 5, 0)
        with pytest.raises(EnvelopeError):
            iterated_value(first, 1, 0)

    def test_rows(self):
        family = random_family(np.random.default_rng(8), n_shells=2)
        rows = list(envelope_rows(envelope_iterate(family, 2)))
        assert len(rows) == 2 * 13
        assert rows[0][:2] == (0, 0.0)
        assert rows[0][-1] == 2

    def test_family_of_field(self, grid16):
        lp = LittlewoodPaley(grid16)
        x1, x2 = grid16.mesh
        family = envelope_family(lp, jnp.asarray(np.sin(x1) + np.cos(3 * x2)), delta=0.5)
        assert family.values.shape == (17, len(lp.shells))
        np.testing.assert_allclose(family.at(0), field_envelope(lp, jnp.asarray(np.sin(x1) + np.cos(3 * x2)),
                                                                0.0, 0.5).values)


class TestNormBlocks:
    def test_constant_series(self, grid16):
        c, T = -2.0, 0.7
        g = jnp.full((8, 16, 16), c)
        blocks = norm_blocks(grid16, g, T / 7)
        L = 2 * math.pi
        assert blocks['Linf_t_L2_x'] == pytest.approx(abs(c) * L)
        assert blocks['L4_tx'] == pytest.approx(abs(c) * (L ** 2 * T) ** 0.25)
        assert blocks['L4_x_Linf_t'] == pytest.approx(abs(c) * L ** 0.5)

    def test_homogeneity(self, grid16):
        g = jnp.asarray(np.random.default_rng(9).standard_normal((5, 16, 16, 2)))
        base, scaled = norm_blocks(grid16, g, 0.1), norm_blocks(grid16, 3.0 * g, 0.1)
        for key in base:
            assert scaled[key] == pytest.approx(3.0 * base[key], rel=1e-12)

    def test_sup_in_time_dominates(self, grid16):
        g = jnp.asarray(np.random.default_rng(10).standard_normal((5, 16, 16)))
        blocks = norm_blocks(grid16, g, 0.1)
        for t in range(5):
            assert blocks['L4_x_Linf_t'] >= float(grid16.spatial_norms(g[t])['L4'])

    def test_needs_two_times(self, grid16):
        with pytest.raises(EnvelopeError):
            norm_blocks(grid16, jnp.ones((1, 16, 16)), 0.1)

    def test_f0_combination(self, grid16):
        g = jnp.full((4, 16, 16), 1.0)
        blocks = norm_blocks(grid16, g, 0.1)
        expected = blocks['Linf_t_L2_x'] + 0.5 * blocks['L4_x_Linf_t'] + blocks['L4_tx']
        assert f0_norm(grid16, g, 0.1, 2) == pytest.approx(expected)


class TestFitting:
    def test_recovers_exponent(self):
        s = np.concatenate([[0.0], 0.01 * 2.0 ** (np.arange(25) / 4)])
        profile = 2.0 * (1 + s * 16.0) ** -4.0
        fit = decay_fit(s, profile, 2)
        assert 3.95 <= fit.exponent <= 4.05
        assert fit.amplitude == pytest.approx(2.0, rel=1e-6)
        assert fit.residual < 1e-6

    def test_noisy_profile(self):
        rng = np.random.default_rng(11)
        s = np.concatenate([[0.0], 0.01 * 2.0 ** (np.arange(25) / 4)])
        profile = 2.0 * (1 + s * 16.0) ** -4.0 * (1 + 0.01 * rng.standard_normal(s.size))
        assert 3.95 <= decay_fit(s, profile, 2).exponent <= 4.05

    def test_zero_profile(self):
        fit = decay_fit(np.linspace(0, 1, 10), np.zeros(10), 1)
        assert math.isnan(fit.exponent)
        assert fit.amplitude == 0.0

    def test_needs_samples_and_span(self):
        with pytest.raises(FitError):
            decay_fit(np.array([0.0, 0.1, 0.2]), np.ones(3), 0)
        with pytest.raises(FitError):
            decay_fit(np.linspace(1.0, 2.0, 10), np.ones(10), 0)
        with pytest.raises(FitError):
            decay_fit(np.linspace(1.0, 2.0, 10), -np.ones(10), 0)

    def test_log_log_slope(self):
        s = np.geomspace(0.01, 10.0, 12)
        fit = log_log_slope(s, 3.0 * s ** -0.5)
        assert fit.slope == pytest.approx(-0.5)
        assert math.exp(fit.intercept) == pytest.approx(3.0)
