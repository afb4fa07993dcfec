from functools import partial

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.errors import FrameError
from core.gauge.fields import GaugeData
from core.gauge.frame import heat_velocity
from core.targets.target import TargetManifold

TAIL_TOLERANCE = 1e-8
# the nested expansion is evaluated on a subgrid of at most this many points per side
NESTED_POINTS = 32


@chex.dataclass(frozen=True)
class DynamicSeparation:
    """Splitting of the frame curvature contraction G(s) = <R(e_a, e_b) e_c, e_d>(s) into its
    s -> infinity limit and an integral of d_s v against the covariant derivative of R.
    - `gamma_inf`: limit part, spatial mean of G at s_max, shape (2n,)*4
    - `gamma_inf_spread`: sup_x |G(s_max) - gamma_inf|
    - `remainder_sup`: sup_x |G(s) - gamma_inf| per level
    - `integral_sup`: sup_x of the derivative integral per level
    - `separation_residual`: sup_x |G(s) - gamma_inf + int_s^{s_max} <(nabla_{d_s v} R)(e_a, e_b) e_c, e_d>| per level
    - `remainder_field`: G(0) - gamma_inf, shape (n, n) + (2n,)*4
    - `gamma1_inf`: limit of <(nabla_{e_l} R)(e_a, e_b) e_c, e_d>, shape (2n,)*5
    - `gamma2_inf`: <(nabla^2_{e_m, e_l} R)(e_a, e_b) e_c, e_d> at s_max (first grid point), shape (2n,)*6
    - `nested_residual`: sup over levels and subgrid of the same separation one order up, for nabla R
    - `tail_bound`: tolerance the remainder is compared against
    """
    gamma_inf: np.ndarray
    gamma_inf_spread: float
    remainder_sup: np.ndarray
    integral_sup: np.ndarray
    separation_residual: np.ndarray
    remainder_field: np.ndarray
    gamma1_inf: np.ndarray
    gamma2_inf: np.ndarray
    nested_residual: float
    tail_bound: float


def _frame_arguments(frames: chex.Array, count: int):
    """frame vectors reshaped so that argument m runs over its own index axis"""
    lead, k, N = frames.shape[:-2], frames.shape[-2], frames.shape[-1]
    return [frames.reshape(lead + (1,) * m + (k,) + (1,) * (count - m - 1) + (N,)) for m in range(count)]


def _point(v: chex.Array, count: int) -> chex.Array:
    return v.reshape(v.shape[:-1] + (1,) * count + v.shape[-1:])


@partial(jax.jit, static_argnums=(0,))
def curvature_contraction(target: TargetManifold, v: chex.Array, frames: chex.Array) -> chex.Array:
    """G[a, b, c, d] = <R(e_a, e_b) e_c, e_d>, shape (..., 2n, 2n, 2n, 2n)"""
    X, Y, Z, W = _frame_arguments(frames, 4)
    return jnp.sum(target.curvature(_point(v, 4), X, Y, Z) * W, axis=-1)


@partial(jax.jit, static_argnums=(0,))
def derivative_contraction(target: TargetManifold, v: chex.Array, direction: chex.Array, frames: chex.Array) -> chex.Array:
    """<(nabla_direction R)(e_a, e_b) e_c, e_d>, shape (..., 2n, 2n, 2n, 2n)"""
    X, Y, Z, W = _frame_arguments(frames, 4)
    p = _point(v, 4)
    d = _point(direction, 4)
    return jnp.sum(target.curvature_cov_derivative(p, d, X, Y, Z, order=1) * W, axis=-1)


@partial(jax.jit, static_argnums=(0,))
def frame_derivative_contraction(target: TargetManifold, v: chex.Array, frames: chex.Array) -> chex.Array:
    """<(nabla_{e_l} R)(e_a, e_b) e_c, e_d>, shape (..., 2n, 2n, 2n, 2n, 2n)"""
    L_, X, Y, Z, W = _frame_arguments(frames, 5)
    return jnp.sum(target.curvature_cov_derivative(_point(v, 5), L_, X, Y, Z, order=1) * W, axis=-1)


@partial(jax.jit, static_argnums=(0,))
def second_derivative_contraction(target: TargetManifold, v: chex.Array, direction: chex.Array,
                                  frames: chex.Array) -> chex.Array:
    """<(nabla^2_{direction, e_l} R)(e_a, e_b) e_c, e_d>, shape (..., 2n, 2n, 2n, 2n, 2n)"""
    L_, X, Y, Z, W = _frame_arguments(frames, 5)
    p = _point(v, 5)
    d = _point(direction, 5)
    return jnp.sum(target.curvature_cov_derivative(p, L_, X, Y, Z, order=2, V=d) * W, axis=-1)


@partial(jax.jit, static_argnums=(0,))
def second_limit_contraction(target: TargetManifold, p: chex.Array, frames: chex.Array) -> chex.Array:
    """<(nabla^2_{e_m, e_l} R)(e_a, e_b) e_c, e_d> at a single point, shape (2n,)*6"""
    M_, L_, X, Y, Z, W = _frame_arguments(frames, 6)
    return jnp.sum(target.curvature_cov_derivative(_point(p, 6), L_, X, Y, Z, order=2, V=M_) * W, axis=-1)


def dynamic_separation(gauge: GaugeData, tail_tolerance: float = TAIL_TOLERANCE) -> DynamicSeparation:
    """Separates G(s) = gamma_inf - int_s^inf <(nabla_{d_s v} R)(e_a, e_b) e_c, e_d> ds'
    (nabla_s e = 0 makes d_s G the nabla R contraction), and nabla R once more through nabla^2 R.

    G is evaluated level by level; the integrals are accumulated from the top level with the
    trapezoid rule.

    Args:
    - `gauge`: caloric gauge along a converged trajectory
    - `tail_tolerance`: truncation tolerance; the limit part must be spatially constant to 10x this

    Returns:
    - (DynamicSeparation): limit parts, remainders and residuals
    """
    target = gauge.target
    s = np.asarray(gauge.s_levels)
    velocity = heat_velocity(gauge.grid, target, gauge.states)
    n_levels = s.size
    stride = max(1, gauge.grid.n // NESTED_POINTS)
    sub = (slice(None, None, stride), slice(None, None, stride))

    top = curvature_contraction(target, gauge.states[-1], gauge.frames[-1])
    gamma_inf = jnp.mean(top, axis=(0, 1))
    spread = float(jnp.max(jnp.abs(top - gamma_inf)))
    if spread > 10 * tail_tolerance:
        raise FrameError(f"limit curvature contraction varies by {spread:.3e} across the grid")
    top_nested = frame_derivative_contraction(target, gauge.states[-1][sub], gauge.frames[-1][sub])
    gamma1_inf = jnp.mean(top_nested, axis=(0, 1))

    remainder_sup = np.zeros(n_levels)
    integral_sup = np.zeros(n_levels)
    residual = np.zeros(n_levels)
    nested_residual = 0.0
    integral = jnp.zeros_like(top)
    nested_integral = jnp.zeros_like(top_nested)
    previous = nested_previous = None
    remainder_field = None
    for level in range(n_levels - 1, -1, -1):
        v, e, tau = gauge.states[level], gauge.frames[level], velocity[level]
        G = curvature_contraction(target, v, e)
        current = derivative_contraction(target, v, tau, e)
        nested_current = second_derivative_contraction(target, v[sub], tau[sub], e[sub])
        if previous is not None:
            h = s[level + 1] - s[level]
            integral = integral + 0.5 * h * (current + previous)
            nested_integral = nested_integral + 0.5 * h * (nested_current + nested_previous)
        remainder = G - gamma_inf
        remainder_sup[level] = float(jnp.max(jnp.abs(remainder)))
        integral_sup[level] = float(jnp.max(jnp.abs(integral)))
        residual[level] = float(jnp.max(jnp.abs(remainder + integral)))
        K = frame_derivative_contraction(target, v[sub], e[sub])
        nested_residual = max(nested_residual, float(jnp.max(jnp.abs(K - gamma1_inf + nested_integral))))
        previous, nested_previous = current, nested_current
        if level == 0:
            remainder_field = np.asarray(remainder)

    gamma2_inf = second_limit_contraction(target, gauge.states[-1, 0, 0], gauge.frames[-1, 0, 0])
    return DynamicSeparation(
        gamma_inf=np.asarray(gamma_inf),
        gamma_inf_spread=spread,
        remainder_sup=remainder_sup,
        integral_sup=integral_sup,
        separation_residual=residual,
        remainder_field=remainder_field,
        gamma1_inf=np.asarray(gamma1_inf),
        gamma2_inf=np.asarray(gamma2_inf),
        nested_residual=nested_residual,
        tail_bound=tail_tolerance,
    )


def constant_curvature_contraction(real_dim: int) -> np.ndarray:
    """<R(e_a, e_b) e_c, e_d> = d_bc d_ad - d_ac d_bd for an orthonormal frame on the unit sphere"""
    eye = np.eye(real_dim)
    return np.einsum('bc,ad->abcd', eye, eye) - np.einsum('ac,bd->abcd', eye, eye)
