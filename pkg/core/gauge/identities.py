from functools import partial

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.common import nonuniform_derivative
from core.gauge.fields import GaugeData, covariant_derivative, curvature_integrand, level_gradient
from core.spectral.grid import Grid2
from core.targets.target import TargetManifold


@chex.dataclass(frozen=True)
class Residual:
    """Size of an identity defect over levels and grid points.
    - `sup`: max over levels and points
    - `l2`: max over levels of the spatial L^2 norm
    - `per_level`: sup per level
    - `scale`: size of the quantities the identity relates, for relative comparisons
    """
    sup: float
    l2: float
    per_level: np.ndarray
    scale: float

    @property
    def relative(self) -> float:
        return self.sup / self.scale if self.scale > 0 else self.sup


def _residual(grid: Grid2, defect: chex.Array, scale: chex.Array) -> Residual:
    per_point = jnp.abs(defect).reshape(defect.shape[:3] + (-1,))
    per_level = np.asarray(jnp.max(per_point, axis=(1, 2, 3)))
    l2 = jnp.sqrt(jnp.sum(per_point ** 2, axis=(1, 2, 3)) * grid.cell_area)
    return Residual(sup=float(per_level.max()), l2=float(jnp.max(l2)), per_level=per_level, scale=float(scale))


def _gradient_scale(gauge: GaugeData) -> chex.Array:
    return jnp.max(jnp.abs(gauge.psi))


def verify_torsion_free(gauge: GaugeData) -> Residual:
    """D_1 psi_2 - D_2 psi_1, which vanishes since nabla_1 d_2 v = nabla_2 d_1 v."""
    D1_psi2 = covariant_derivative(gauge.grid, gauge.A[:, :, :, 0], gauge.psi[:, :, :, 1], 0)
    D2_psi1 = covariant_derivative(gauge.grid, gauge.A[:, :, :, 1], gauge.psi[:, :, :, 0], 1)
    return _residual(gauge.grid, D1_psi2 - D2_psi1, _gradient_scale(gauge))


def connection_curvature(grid: Grid2, A: chex.Array) -> chex.Array:
    """d_1 A_2 - d_2 A_1 + [A_1, A_2] for the matrices acting on component columns (transposed A)."""
    cal_A = jnp.swapaxes(A, -1, -2)
    a1, a2 = cal_A[:, :, :, 0], cal_A[:, :, :, 1]
    d1_a2 = jax.vmap(lambda f: grid.derivative(f, 0))(a2)
    d2_a1 = jax.vmap(lambda f: grid.derivative(f, 1))(a1)
    return d1_a2 - d2_a1 + a1 @ a2 - a2 @ a1


def pulled_back_curvature(gauge: GaugeData) -> chex.Array:
    """Matrix G[q, p] = <R(d_1 v, d_2 v) e_p, e_q> per level and point."""
    dv = level_gradient(gauge.grid, gauge.states)
    M = curvature_integrand(gauge.target, gauge.states, dv[:, :, :, 0], dv[:, :, :, 1], gauge.frames)
    return jnp.swapaxes(M, -1, -2)


def verify_commutator(gauge: GaugeData) -> Residual:
    """Connection curvature against the pulled-back Riemann tensor in the frame:
    [D_1, D_2] = d_1 A_2 - d_2 A_1 + [A_1, A_2] must equal R(d_1 v, d_2 v) acting on frame components.
    The residual is the matrix defect; its scale is the size of the curvature side (or of |dv|^2 when flat)."""
    F = connection_curvature(gauge.grid, gauge.A)
    G = pulled_back_curvature(gauge)
    scale = jnp.maximum(jnp.max(jnp.abs(G)), _gradient_scale(gauge) ** 2)
    return _residual(gauge.grid, F - G, scale)


def verify_commutator_on_section(gauge: GaugeData) -> Residual:
    """The commutator defect applied to the test section psi_1."""
    F = connection_curvature(gauge.grid, gauge.A)
    G = pulled_back_curvature(gauge)
    w = gauge.psi[:, :, :, 0]
    return _residual(gauge.grid, jnp.einsum('...qp,...p->...q', F - G, w), _gradient_scale(gauge) ** 3)


def verify_heat_tension_identity(gauge: GaugeData) -> Residual:
    """psi_s - sum_j D_j psi_j, the gauged heat flow equation."""
    divergence = sum(covariant_derivative(gauge.grid, gauge.A[:, :, :, j], gauge.psi[:, :, :, j], j) for j in range(2))
    return _residual(gauge.grid, gauge.psi_s - divergence, jnp.max(jnp.abs(gauge.psi_s)))


@partial(jax.jit, static_argnums=(0,))
def curvature_forcing(target: TargetManifold, states: chex.Array, dv: chex.Array, frames: chex.Array) -> chex.Array:
    """sum_j <R(d_i v, d_j v) d_j v, e_q> for i = 1, 2, shape (..., 2, 2n)"""
    p = states
    terms = []
    for i in range(2):
        total = sum(target.curvature(p, dv[..., i, :], dv[..., j, :], dv[..., j, :]) for j in range(2))
        terms.append(jnp.einsum('...c,...qc->...q', total, frames))
    return jnp.stack(terms, axis=-2)


def covariant_laplacian(grid: Grid2, A: chex.Array, w: chex.Array) -> chex.Array:
    """sum_j D_j D_j w"""
    out = 0.0
    for j in range(2):
        Dw = covariant_derivative(grid, A[:, :, :, j], w, j)
        out = out + covariant_derivative(grid, A[:, :, :, j], Dw, j)
    return out


def verify_parabolic_fields(gauge: GaugeData) -> Residual:
    """d_s psi_i - sum_j D_j D_j psi_i - sum_j [R(d_i v, d_j v) d_j v]_E at interior levels,
    with d_s psi_i from finite differences across levels."""
    dv = level_gradient(gauge.grid, gauge.states)
    forcing = curvature_forcing(gauge.target, gauge.states, dv, gauge.frames)
    ds_psi = nonuniform_derivative(gauge.psi, gauge.s_levels)
    defect = jnp.stack([
        ds_psi[:, :, :, i] - covariant_laplacian(gauge.grid, gauge.A, gauge.psi[:, :, :, i]) - forcing[:, :, :, i]
        for i in range(2)
    ], axis=3)
    return _residual(gauge.grid, defect[1:-1], jnp.max(jnp.abs(ds_psi)))
