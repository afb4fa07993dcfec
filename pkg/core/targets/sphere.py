import chex
import jax.numpy as jnp
import numpy as np

from core.targets.target import TargetManifold


class Sphere2(TargetManifold):
    """Unit sphere S^2 in R^3 with J_p X = p x X. Constant sectional curvature one."""

    name = 'sphere2'
    block_dim = 3
    n_blocks = 1
    complex_dim = 1

    @property
    def base_point(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    @property
    def reference_frame(self) -> np.ndarray:
        return np.array([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ])

    def _complex_structure(self, p: chex.Array, X: chex.Array) -> chex.Array:
        pb, Xb = jnp.broadcast_arrays(self._split(p), self._split(X))
        return self._join(jnp.cross(pb, Xb))


class SphereProduct(Sphere2):
    """S^2 x S^2 in R^6, each factor a unit sphere with its own cross-product complex structure.
    Sectional curvature varies between 1 (planes inside a factor) and 0 (mixed planes)."""

    name = 'sphere_product'
    n_blocks = 2
    complex_dim = 2

    @property
    def base_point(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0])

    @property
    def reference_frame(self) -> np.ndarray:
        return np.eye(6)[[0, 1, 3, 4]]
