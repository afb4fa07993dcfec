import math

import jax.numpy as jnp
import numpy as np
import pytest

from core.errors import CutLocusError, OffManifoldError, UnsupportedOrderError
from core.targets.factory import TARGETS, make_target
from core.targets.sphere import Sphere2
from core.targets.target import inner
from core.targets.torus import FlatTorus2


def random_point(target, rng, batch=()):
    q = rng.standard_normal(batch + (target.n_blocks, target.block_dim))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return jnp.asarray(q.reshape(batch + (target.ambient_dim,)))


def random_tangent(target, p, rng):
    return target.project_tangent(p, jnp.asarray(rng.standard_normal(p.shape)))


class TestSphere:
    def test_examples_at_Q(self):
        sphere = Sphere2()
        Q = jnp.asarray(sphere.base_point)
        np.testing.assert_allclose(np.asarray(sphere.project_tangent(Q, jnp.array([1.0, 2.0, 3.0]))), [1, 2, 0])
        X = jnp.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(np.asarray(sphere.second_fundamental_form(Q, X, X)), [0, 0, -1])
        np.testing.assert_allclose(np.asarray(sphere.complex_structure(Q, X)), [0, 1, 0])
        np.testing.assert_allclose(np.asarray(sphere.curvature(Q, X, jnp.array([0.0, 1.0, 0.0]),
                                                               jnp.array([0.0, 1.0, 0.0]))), [1, 0, 0])

    def test_off_manifold_point(self):
        with pytest.raises(OffManifoldError):
            Sphere2().project_tangent(jnp.array([0.0, 0.0, 1.1]), jnp.array([1.0, 0.0, 0.0]))

    def test_non_tangent_vector(self):
        sphere = Sphere2()
        with pytest.raises(OffManifoldError):
            sphere.curvature(jnp.asarray(sphere.base_point), jnp.array([0.0, 0.0, 1.0]),
                             jnp.array([1.0, 0.0, 0.0]), jnp.array([1.0, 0.0, 0.0]))

    def test_retract(self):
        sphere = Sphere2()
        np.testing.assert_allclose(np.asarray(sphere.retract(jnp.array([0.0, 0.0, 1.05]))), [0, 0, 1])
        with pytest.raises(OffManifoldError):
            sphere.retract(jnp.array([0.0, 0.0, 1.5]))

    def test_exp_map(self):
        sphere = Sphere2()
        Q = jnp.asarray(sphere.base_point)
        np.testing.assert_allclose(np.asarray(sphere.exp_map(Q, jnp.array([math.pi / 2, 0.0, 0.0]))), [1, 0, 0],
                                   atol=1e-15)
        np.testing.assert_allclose(np.asarray(sphere.exp_map(Q, jnp.zeros(3))), [0, 0, 1])
        with pytest.raises(CutLocusError):
            sphere.exp_map(Q, jnp.array([math.pi, 0.0, 0.0]))


@pytest.mark.parametrize('name', sorted(TARGETS))
class TestTargetIdentities:
    def test_projection_is_idempotent(self, name):
        target = make_target(name)
        rng = np.random.default_rng(0)
        p = random_point(target, rng, (5,))
        X = random_tangent(target, p, rng)
        np.testing.assert_allclose(np.asarray(target.project_tangent(p, X)), np.asarray(X), atol=1e-14)
        assert float(jnp.max(target.tangent_defect(p, X))) < 1e-14

    def test_reference_frame_at_Q(self, name):
        target = make_target(name)
        Q = jnp.asarray(target.base_point)
        frame = jnp.asarray(target.reference_frame)
        np.testing.assert_allclose(np.asarray(frame @ frame.T), np.eye(target.real_dim), atol=1e-15)
        np.testing.assert_allclose(np.asarray(target.complex_structure(Q, frame[0::2])), np.asarray(frame[1::2]),
                                   atol=1e-15)

    def test_complex_structure_squares_to_minus_one(self, name):
        target = make_target(name)
        rng = np.random.default_rng(1)
        p = random_point(target, rng, (5,))
        X = random_tangent(target, p, rng)
        JX = target.complex_structure(p, X)
        np.testing.assert_allclose(np.asarray(target.complex_structure(p, JX)), -np.asarray(X), atol=1e-13)
        np.testing.assert_allclose(np.asarray(inner(JX, X)), 0.0, atol=1e-13)

    def test_curvature_symmetries(self, name):
        target = make_target(name)
        rng = np.random.default_rng(2)
        p = random_point(target, rng, (4,))
        X, Y, Z, W = (random_tangent(target, p, rng) for _ in range(4))
        R = lambda a, b, c, d: np.asarray(inner(target.curvature(p, a, b, c), d))
        np.testing.assert_allclose(R(X, Y, Z, W), -R(Y, X, Z, W), atol=1e-12)
        np.testing.assert_allclose(R(X, Y, Z, W), -R(X, Y, W, Z), atol=1e-12)
        np.testing.assert_allclose(R(X, Y, Z, W), R(Z, W, X, Y), atol=1e-12)
        np.testing.assert_allclose(R(X, Y, Z, W) + R(Y, Z, X, W) + R(Z, X, Y, W), 0.0, atol=1e-12)
        JZ, JW = target.complex_structure(p, Z), target.complex_structure(p, W)
        np.testing.assert_allclose(R(X, Y, JZ, JW), R(X, Y, Z, W), atol=1e-12)

    def test_gauss_equation(self, name):
        target = make_target(name)
        rng = np.random.default_rng(3)
        p = random_point(target, rng, (4,))
        X, Y = random_tangent(target, p, rng), random_tangent(target, p, rng)
        S = target.second_fundamental_form
        lhs = inner(S(p, X, X), S(p, Y, Y)) - inner(S(p, X, Y), S(p, X, Y))
        rhs = inner(target.curvature(p, X, Y, Y), X)
        np.testing.assert_allclose(np.asarray(lhs), np.asarray(rhs), atol=1e-12)

    def test_second_fundamental_form_against_derivative_of_projection(self, name):
        target = make_target(name)
        rng = np.random.default_rng(4)
        p = random_point(target, rng, (4,))
        X, Y = random_tangent(target, p, rng), random_tangent(target, p, rng)
        np.testing.assert_allclose(np.asarray(target.embedding_second_differential(p, X, Y)),
                                   np.asarray(target.second_fundamental_form(p, X, Y)), atol=1e-12)

    def test_curvature_is_parallel(self, name):
        target = make_target(name)
        rng = np.random.default_rng(5)
        p = random_point(target, rng)
        W, X, Y, Z, T = (random_tangent(target, p, rng) for _ in range(5))
        assert abs(float(target.curvature_transport_quotient(p, W, X, Y, Z, T))) < 1e-6
        np.testing.assert_array_equal(np.asarray(target.curvature_cov_derivative(p, W, X, Y, Z, order=1)), 0.0)

    def test_unsupported_order(self, name):
        target = make_target(name)
        Q = jnp.asarray(target.base_point)
        X = jnp.asarray(target.reference_frame[0])
        with pytest.raises(UnsupportedOrderError):
            target.curvature_cov_derivative(Q, X, X, X, X, order=3)

    def test_exp_map_lands_on_manifold(self, name):
        target = make_target(name)
        rng = np.random.default_rng(6)
        p = random_point(target, rng, (6,))
        X = 0.5 * random_tangent(target, p, rng) / target.block_dim
        assert float(jnp.max(target.distance_to_manifold(target.exp_map(p, X)))) < 1e-14


class TestFlatTorus:
    def test_curvature_vanishes(self):
        torus = FlatTorus2()
        Q = jnp.asarray(torus.base_point)
        t_a, t_b = (jnp.asarray(v) for v in torus.reference_frame)
        np.testing.assert_array_equal(np.asarray(torus.curvature(Q, t_a, t_b, t_a)), 0.0)

    def test_rotates_t_a_into_t_b(self):
        torus = FlatTorus2()
        Q = jnp.asarray(torus.base_point)
        t_a, t_b = torus.tangent_basis(Q)
        np.testing.assert_allclose(np.asarray(torus.complex_structure(Q, t_a)), np.asarray(t_b))


def test_unknown_target():
    with pytest.raises(OffManifoldError):
        make_target('banana')
