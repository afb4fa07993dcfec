import chex
import jax.numpy as jnp

from core.spectral.grid import Grid2
from core.targets.target import TargetManifold


@chex.dataclass(frozen=True)
class MapField:
    """A map from the grid into the embedded target.
    - `grid`: the periodic grid the map is sampled on
    - `target`: the target manifold
    - `values`: ambient coordinates, shape (n, n, N)
    """
    grid: Grid2
    target: TargetManifold
    values: chex.Array

    def constraint_defect(self) -> float:
        """largest distance of a grid value to the target"""
        return float(jnp.max(self.target.distance_to_manifold(self.values)))

    def sup_distance(self, point: chex.Array) -> float:
        """sup_x |u(x) - point|"""
        return float(jnp.max(jnp.linalg.norm(self.values - point, axis=-1)))


def constant_map(grid: Grid2, target: TargetManifold, point=None) -> MapField:
    """The constant map u = point (default Q)."""
    point = target.base_point if point is None else point
    values = jnp.broadcast_to(jnp.asarray(point, dtype=jnp.float64), grid.shape + (target.ambient_dim,))
    return MapField(grid=grid, target=target, values=values)
