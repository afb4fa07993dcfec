import chex
import jax.numpy as jnp
import numpy as np

from core.targets.target import TargetManifold


def _rotate(a: chex.Array) -> chex.Array:
    """a -> a rotated by pi/2 in its plane"""
    return jnp.stack([-a[..., 1], a[..., 0]], axis=-1)


class FlatTorus2(TargetManifold):
    """Flat torus S^1 x S^1 in R^4, product of two unit circles.

    The tangent space at (a, b) is spanned by t_a = (a_perp, 0) and t_b = (0, b_perp);
    J rotates t_a into t_b. The metric is flat, so R and all its derivatives vanish.
    """

    name = 'flat_torus2'
    block_dim = 2
    n_blocks = 2
    complex_dim = 1

    @property
    def base_point(self) -> np.ndarray:
        return np.array([1.0, 0.0, 1.0, 0.0])

    @property
    def reference_frame(self) -> np.ndarray:
        return np.array([
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])

    def tangent_basis(self, p: chex.Array):
        """(t_a, t_b) at p"""
        pb = self._split(p)
        zeros = jnp.zeros_like(pb[..., 0, :])
        t_a = jnp.concatenate([_rotate(pb[..., 0, :]), zeros], axis=-1)
        t_b = jnp.concatenate([zeros, _rotate(pb[..., 1, :])], axis=-1)
        return t_a, t_b

    def _complex_structure(self, p: chex.Array, X: chex.Array) -> chex.Array:
        t_a, t_b = self.tangent_basis(p)
        x_a = jnp.sum(X * t_a, axis=-1, keepdims=True)
        x_b = jnp.sum(X * t_b, axis=-1, keepdims=True)
        return x_a * t_b - x_b * t_a

    def _curvature(self, p: chex.Array, X: chex.Array, Y: chex.Array, Z: chex.Array) -> chex.Array:
        shape = jnp.broadcast_shapes(p.shape, X.shape, Y.shape, Z.shape)
        return jnp.zeros(shape, dtype=X.dtype)
