from functools import partial
from typing import Optional, Tuple

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.errors import FrameError
from core.heatflow.heat import HeatTrajectory
from core.spectral.grid import Grid2
from core.targets.target import TargetManifold, inner

# frames must stay orthonormal to this tolerance along the backward sweep
ORTHONORMALITY_TOLERANCE = 1e-8
# largest admissible distance between v(s_max) and its limit point
SEED_TOLERANCE = 1e-6


@chex.dataclass(frozen=True)
class Frame:
    """Caloric frames {e_1, Je_1, ..., e_n, Je_n} per s-level and grid point.
    - `vectors`: shape (L, n, n, 2n, N), index 2a is e_(a+1), index 2a+1 is J e_(a+1)
    - `s_levels`: heat times of the levels
    - `seed_point`: point the frame was seeded at (the heat-flow limit)
    - `orthonormality_defect`: max |<e_p, e_q> - delta_pq|
    - `tangency_defect`: max normal component of a frame vector
    - `complex_defect`: max |e_(2a+1) - J e_(2a)|
    """
    vectors: chex.Array
    s_levels: chex.Array
    seed_point: chex.Array
    orthonormality_defect: float
    tangency_defect: float
    complex_defect: float


def j_gram_schmidt(target: TargetManifold, p: chex.Array, candidates: chex.Array) -> chex.Array:
    """Builds a J-compatible orthonormal frame at p from n candidate vectors.

    Each candidate is projected to T_p, stripped of its components along the frame built so far,
    normalised to give e_a, and followed by J e_a.

    Args:
    - `target`: target manifold
    - `p`: base points, shape (..., N)
    - `candidates`: shape (..., n, N)

    Returns:
    - (chex.Array): frame of shape (..., 2n, N)
    """
    frame = []
    for a in range(target.complex_dim):
        w = target.project_tangent(p, candidates[..., a, :])
        for f in frame:
            w = w - inner(w, f)[..., None] * f
        e = w / jnp.linalg.norm(w, axis=-1, keepdims=True)
        frame += [e, target.complex_structure(p, e)]
    return jnp.stack(frame, axis=-2)


def tangent_projector(target: TargetManifold, v: chex.Array) -> chex.Array:
    """P_v as an (N, N) matrix per point"""
    normals = target.normal_basis(v)
    eye = jnp.eye(target.ambient_dim, dtype=v.dtype)
    return eye - jnp.einsum('...mi,...mj->...ij', normals, normals)


def transport_generator(target: TargetManifold, v: chex.Array, velocity: chex.Array) -> chex.Array:
    """Skew generator K = [dP, P] of parallel transport along the velocity dv/ds.
    On tangent vectors K e = (D_velocity P) e = S(velocity, e)."""
    P, P_dot = jax.jvp(lambda w: tangent_projector(target, w), (v,), (velocity,))
    return P_dot @ P - P @ P_dot


def cayley_step(K_a: chex.Array, K_b: chex.Array, vectors: chex.Array, h: chex.Array) -> chex.Array:
    """Advances frame rows by h with the Cayley transform of the midpoint generator.
    Exactly orthogonal, and the step with -h inverts the step with h."""
    K = 0.5 * (K_a + K_b)
    eye = jnp.eye(K.shape[-1], dtype=K.dtype)
    C = jnp.linalg.solve(eye - 0.5 * h * K, eye + 0.5 * h * K)
    return jnp.einsum('...ij,...pj->...pi', C, vectors)


@partial(jax.jit, static_argnums=(0, 1))
def heat_velocity(grid: Grid2, target: TargetManifold, states: chex.Array) -> chex.Array:
    """dv/ds = tau(v) = P_v(Laplacian v) per level, states of shape (L, n, n, N)"""
    return jax.vmap(lambda v: target.project_tangent(v, grid.laplacian(v)))(states)


@partial(jax.jit, static_argnums=(0, 1, 5))
def _transport_sweep(grid: Grid2, target: TargetManifold, states: chex.Array, s_levels: chex.Array,
                     seed: chex.Array, reproject: bool) -> chex.Array:
    velocities = heat_velocity(grid, target, states)

    def step(vectors, xs):
        v_a, tau_a, s_a, v_b, tau_b, s_b = xs
        K_a = transport_generator(target, v_a, tau_a)
        K_b = transport_generator(target, v_b, tau_b)
        vectors = cayley_step(K_a, K_b, vectors, s_b - s_a)
        if reproject:
            vectors = j_gram_schmidt(target, v_b, vectors[..., 0::2, :])
        return vectors, vectors

    # walk from the top level down to s = 0
    xs = (states[:0:-1], velocities[:0:-1], s_levels[:0:-1], states[-2::-1], velocities[-2::-1], s_levels[-2::-1])
    _, swept = jax.lax.scan(step, seed, xs)
    return jnp.concatenate([swept[::-1], seed[None]], axis=0)


@partial(jax.jit, static_argnums=(0,))
def frame_defects(target: TargetManifold, states: chex.Array, vectors: chex.Array) -> Tuple[chex.Array, chex.Array, chex.Array]:
    """(orthonormality, tangency, J-compatibility) defects of frames over all levels and points"""
    gram = jnp.einsum('...pi,...qi->...pq', vectors, vectors)
    eye = jnp.eye(target.real_dim, dtype=vectors.dtype)
    ortho = jnp.max(jnp.abs(gram - eye))
    p = states[..., None, :]
    tangency = jnp.max(target.tangent_defect(p, vectors))
    j_images = target.complex_structure(p, vectors[..., 0::2, :])
    complex_defect = jnp.max(jnp.abs(j_images - vectors[..., 1::2, :]))
    return ortho, tangency, complex_defect


def seed_frame(target: TargetManifold, values: chex.Array, reference_frame: Optional[chex.Array] = None) -> chex.Array:
    """Reference frame projected onto the tangent spaces along `values` and J-Gram-Schmidt orthonormalised."""
    reference = jnp.asarray(target.reference_frame if reference_frame is None else reference_frame)
    candidates = jnp.broadcast_to(reference[0::2], values.shape[:-1] + reference[0::2].shape)
    return j_gram_schmidt(target, values, candidates)


def build_caloric_frame(traj: HeatTrajectory, reference_frame: Optional[chex.Array] = None,
                        reproject: bool = True) -> Frame:
    """Caloric frames along a converged heat trajectory.

    The frame is seeded at s_max with the reference frame carried to T_{v(s_max)} and then parallel
    transported (nabla_s e = 0) down to s = 0, one Cayley step per level interval, each step followed
    by projection and J-Gram-Schmidt re-orthonormalisation.

    Args:
    - `traj`: heat trajectory, converged to its limit point within 1e-6
    - `reference_frame`: (optional) J-compatible orthonormal frame at Q, defaults to the target's
    - `reproject`: project and re-orthonormalise after every transport step

    Returns:
    - (Frame): caloric frames on every level
    """
    if not traj.converged_to_Q or traj.sup_dist_limit >= SEED_TOLERANCE:
        raise FrameError(f"heat trajectory has not converged (sup distance to its limit {traj.sup_dist_limit:.3e})")
    target = traj.target
    seed = seed_frame(target, traj.states[-1], reference_frame)
    vectors = _transport_sweep(traj.grid, target, traj.states, traj.s_levels, seed, reproject)
    ortho, tangency, complex_defect = (float(x) for x in frame_defects(target, traj.states, vectors))
    if ortho > ORTHONORMALITY_TOLERANCE:
        raise FrameError(f"frame orthonormality drifted to {ortho:.3e}")
    return Frame(
        vectors=vectors,
        s_levels=traj.s_levels,
        seed_point=traj.limit_point,
        orthonormality_defect=ortho,
        tangency_defect=tangency,
        complex_defect=complex_defect,
    )


def transport_frame(target: TargetManifold, vectors: chex.Array, v_a: chex.Array, tau_a: chex.Array,
                    v_b: chex.Array, tau_b: chex.Array, h: float) -> chex.Array:
    """A single transport step from (v_a, tau_a) to (v_b, tau_b) over heat time h, without reprojection."""
    K_a = transport_generator(target, v_a, tau_a)
    K_b = transport_generator(target, v_b, tau_b)
    return cayley_step(K_a, K_b, vectors, jnp.asarray(h, dtype=vectors.dtype))


def reference_alignment(target: TargetManifold, frame: Frame, reference_frame: Optional[np.ndarray] = None) -> float:
    """min_p <e_p(s_max), e~_p>: coordinate-free surrogate for frame convergence to the reference."""
    reference = jnp.asarray(target.reference_frame if reference_frame is None else reference_frame)
    return float(jnp.min(jnp.sum(frame.vectors[-1] * reference, axis=-1)))
