from functools import partial
from typing import Dict

import chex
import jax
import jax.numpy as jnp

from core.errors import EnvelopeError
from core.spectral.grid import Grid2


def _magnitude(g: chex.Array) -> chex.Array:
    """pointwise magnitude over trailing component axes of a (T, n, n, ...) series"""
    if g.ndim == 3:
        return jnp.abs(g)
    return jnp.sqrt(jnp.sum(g.reshape(g.shape[:3] + (-1,)) ** 2, axis=-1))


@partial(jax.jit, static_argnums=(0,))
def _norm_blocks(grid: Grid2, g: chex.Array, dt: chex.Array) -> Dict[str, chex.Array]:
    m = _magnitude(g)
    l2_per_time = jnp.sqrt(jnp.sum(m ** 2, axis=(1, 2)) * grid.cell_area)
    l4_per_time = jnp.sum(m ** 4, axis=(1, 2)) * grid.cell_area
    time_integral = dt * (jnp.sum(l4_per_time) - 0.5 * (l4_per_time[0] + l4_per_time[-1]))
    return {
        'Linf_t_L2_x': jnp.max(l2_per_time),
        'L4_tx': time_integral ** 0.25,
        'L4_x_Linf_t': (jnp.sum(jnp.max(m, axis=0) ** 4) * grid.cell_area) ** 0.25,
    }


def norm_blocks(grid: Grid2, g: chex.Array, dt: float) -> Dict[str, float]:
    """The three computable blocks of the F^0_k norm of a space-time series.

    Sup in t then L^2 in x; L^4 in (t, x) with the trapezoid rule in t; L^4 in x of the sup in t
    (x-outer).

    Args:
    - `grid`: spatial grid
    - `g`: series of shape (T, n, n[, C]) on a uniform t-grid
    - `dt`: time spacing

    Returns:
    - (Dict[str, float]): 'Linf_t_L2_x', 'L4_tx', 'L4_x_Linf_t'
    """
    if g.ndim < 3 or g.shape[0] < 2:
        raise EnvelopeError(f"norm blocks need at least 2 time samples, got shape {tuple(g.shape)}")
    grid.check_field(g[0])
    return {k: float(v) for k, v in _norm_blocks(grid, jnp.asarray(g), jnp.asarray(dt, dtype=jnp.float64)).items()}


def f0_norm(grid: Grid2, g: chex.Array, dt: float, k: int) -> float:
    """||g||_{L^inf_t L^2_x} + 2^(-k/2) ||g||_{L^4_x L^inf_t} + ||g||_{L^4}"""
    blocks = norm_blocks(grid, g, dt)
    return blocks['Linf_t_L2_x'] + 2.0 ** (-k / 2) * blocks['L4_x_Linf_t'] + blocks['L4_tx']
