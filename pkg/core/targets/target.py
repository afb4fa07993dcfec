from functools import partial
from typing import Dict, Optional, Tuple

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.errors import CutLocusError, OffManifoldError, UnsupportedOrderError

# preconditions are checked one order above accumulated spectral error
PRE_TOLERANCE = 1e-8
RETRACT_RADIUS = 0.1


def _concrete(*arrays) -> bool:
    return not any(isinstance(a, jax.core.Tracer) for a in arrays)


def inner(X: chex.Array, Y: chex.Array) -> chex.Array:
    """Euclidean inner product over the trailing ambient axis."""
    return jnp.sum(X * Y, axis=-1)


class TargetManifold:
    """Compact Kähler manifold isometrically embedded in R^N, realised as a product of
    `n_blocks` round unit spheres, each living in its own block of `block_dim` ambient coordinates.

    All geometric kernels act on arrays whose trailing axis is the ambient axis of length N and
    broadcast over every leading axis (grid points, frame indices, s-levels, ...). Called with
    concrete arrays they check their preconditions and raise; called under a jax trace the checks
    are skipped and the caller is responsible for reporting the diagnostics it computes.

    Subclasses fix the block layout, the complex structure and the reference data at Q.
    """

    name: str = 'target'
    block_dim: int = 3
    n_blocks: int = 1
    complex_dim: int = 1

    def __init__(self, tolerance: float = PRE_TOLERANCE):
        """
        Args:
        - `tolerance`: precondition tolerance for on-manifold and tangency checks
        """
        self.tolerance = tolerance

    def __hash__(self):
        return hash((self.name, self.tolerance))

    def __eq__(self, other):
        return isinstance(other, TargetManifold) and (self.name, self.tolerance) == (other.name, other.tolerance)

    def __repr__(self):
        return f"{self.__class__.__name__}()"

    @property
    def ambient_dim(self) -> int:
        return self.block_dim * self.n_blocks

    @property
    def real_dim(self) -> int:
        return 2 * self.complex_dim

    @property
    def base_point(self) -> np.ndarray:
        """the point Q, shape (N,)"""
        raise NotImplementedError()

    @property
    def reference_frame(self) -> np.ndarray:
        """{e_1, Je_1, ..., e_n, Je_n} at Q, shape (2n, N)"""
        raise NotImplementedError()

    def get_config(self) -> Dict:
        """Returns the configuration of the target. Q and the reference frame are echoed as plain lists."""
        return {
            'target': self.name,
            'ambient_dim': self.ambient_dim,
            'complex_dim': self.complex_dim,
            'base_point': self.base_point.tolist(),
            'reference_frame': self.reference_frame.tolist(),
        }

    # ---- block helpers ----

    def _split(self, x: chex.Array) -> chex.Array:
        return x.reshape(x.shape[:-1] + (self.n_blocks, self.block_dim))

    def _join(self, x: chex.Array) -> chex.Array:
        return x.reshape(x.shape[:-2] + (self.ambient_dim,))

    def _block_inner(self, X: chex.Array, Y: chex.Array) -> chex.Array:
        return jnp.sum(self._split(X) * self._split(Y), axis=-1, keepdims=True)

    # ---- pointwise kernels ----

    def _project(self, p: chex.Array, X: chex.Array) -> chex.Array:
        pb, Xb = self._split(p), self._split(X)
        return self._join(Xb - jnp.sum(pb * Xb, axis=-1, keepdims=True) * pb)

    def _second_fundamental_form(self, p: chex.Array, X: chex.Array, Y: chex.Array) -> chex.Array:
        return self._join(-self._block_inner(X, Y) * self._split(p))

    def _complex_structure(self, p: chex.Array, X: chex.Array) -> chex.Array:
        raise NotImplementedError()

    def _curvature(self, p: chex.Array, X: chex.Array, Y: chex.Array, Z: chex.Array) -> chex.Array:
        Xb, Yb = self._split(X), self._split(Y)
        return self._join(self._block_inner(Y, Z) * Xb - self._block_inner(X, Z) * Yb)

    def _retract(self, q: chex.Array) -> chex.Array:
        qb = self._split(q)
        return self._join(qb / jnp.linalg.norm(qb, axis=-1, keepdims=True))

    def _exp_map(self, p: chex.Array, X: chex.Array) -> chex.Array:
        pb, Xb = self._split(p), self._split(X)
        theta = jnp.linalg.norm(Xb, axis=-1, keepdims=True)
        # sin(theta)/theta without the removable singularity
        return self._join(jnp.cos(theta) * pb + jnp.sinc(theta / jnp.pi) * Xb)

    def distance_to_manifold(self, q: chex.Array) -> chex.Array:
        """Euclidean distance from ambient points to the manifold, shape q.shape[:-1]."""
        radii = jnp.linalg.norm(self._split(q), axis=-1)
        return jnp.sqrt(jnp.sum((radii - 1.0) ** 2, axis=-1))

    def normal_basis(self, p: chex.Array) -> chex.Array:
        """Orthonormal basis of the normal space at p, shape p.shape[:-1] + (N - 2n, N)."""
        pb = self._split(p)
        eye = jnp.eye(self.n_blocks, dtype=p.dtype)
        # block b of normal vector b is p_b, other blocks vanish
        return (eye[..., :, :, None] * pb[..., None, :, :]).reshape(p.shape[:-1] + (self.n_blocks, self.ambient_dim))

    def tangent_defect(self, p: chex.Array, X: chex.Array) -> chex.Array:
        """|X - P_p X|, the size of the normal component of X."""
        return jnp.linalg.norm(X - self._project(p, X), axis=-1)

    # ---- checks ----

    def _require_on_manifold(self, p: chex.Array) -> None:
        if _concrete(p):
            dist = float(jnp.max(self.distance_to_manifold(p)))
            if dist > self.tolerance:
                raise OffManifoldError(f"point lies {dist:.3e} off {self.name} (tolerance {self.tolerance:.1e})")

    def _require_tangent(self, p: chex.Array, *vectors: chex.Array) -> None:
        self._require_on_manifold(p)
        if _concrete(p, *vectors):
            for X in vectors:
                defect = float(jnp.max(self.tangent_defect(p, X) / jnp.maximum(1.0, jnp.linalg.norm(X, axis=-1))))
                if defect > self.tolerance:
                    raise OffManifoldError(f"vector has normal component {defect:.3e} (tolerance {self.tolerance:.1e})")

    # ---- public operations ----

    def project_tangent(self, p: chex.Array, X: chex.Array) -> chex.Array:
        """Orthogonal projection of the ambient vector X onto T_p N.

        Args:
        - `p`: point(s) on the manifold, trailing axis N
        - `X`: ambient vector(s), broadcastable against p

        Returns:
        - (chex.Array): tangent vector(s)
        """
        self._require_on_manifold(p)
        return self._project(p, X)

    def second_fundamental_form(self, p: chex.Array, X: chex.Array, Y: chex.Array) -> chex.Array:
        """Normal-valued second fundamental form S(X, Y) at p; on a unit sphere S(X, Y) = -<X, Y> p."""
        self._require_tangent(p, X, Y)
        return self._second_fundamental_form(p, X, Y)

    def complex_structure(self, p: chex.Array, X: chex.Array) -> chex.Array:
        """J_p X."""
        self._require_tangent(p, X)
        return self._complex_structure(p, X)

    def curvature(self, p: chex.Array, X: chex.Array, Y: chex.Array, Z: chex.Array) -> chex.Array:
        """Riemann curvature R(X, Y)Z at p, sign convention R(X,Y)Z = <Y,Z>X - <X,Z>Y on the unit sphere."""
        self._require_tangent(p, X, Y, Z)
        return self._curvature(p, X, Y, Z)

    def curvature_cov_derivative(self, p: chex.Array, W: chex.Array, X: chex.Array, Y: chex.Array,
                                 Z: chex.Array, order: int = 1, V: Optional[chex.Array] = None) -> chex.Array:
        """Covariant derivatives of the curvature tensor.

        order 0 is R(X,Y)Z itself, order 1 is (nabla_W R)(X,Y)Z and order 2 is
        (nabla^2_{V,W} R)(X,Y)Z. Every supported target is locally symmetric, so orders 1 and 2
        vanish identically.

        Args:
        - `p`: base point(s)
        - `W`: differentiation direction
        - `X`, `Y`, `Z`: curvature arguments
        - `order`: 0, 1 or 2
        - `V`: second differentiation direction (order 2 only)

        Returns:
        - (chex.Array): tangent vector(s)
        """
        if order not in (0, 1, 2):
            raise UnsupportedOrderError(f"curvature derivatives are available up to order 2, got {order}")
        if order == 0:
            return self.curvature(p, X, Y, Z)
        vectors = (W, X, Y, Z) if V is None else (V, W, X, Y, Z)
        self._require_tangent(p, *vectors)
        shape = jnp.broadcast_shapes(*(v.shape for v in (p,) + vectors))
        return jnp.zeros(shape, dtype=p.dtype)

    def retract(self, q: chex.Array) -> chex.Array:
        """Nearest-point retraction onto the manifold; fixes points already on it."""
        if _concrete(q):
            dist = float(jnp.max(self.distance_to_manifold(q)))
            if dist >= RETRACT_RADIUS:
                raise OffManifoldError(f"cannot retract a point {dist:.3e} away from {self.name}")
        return self._retract(q)

    def embedding_differential(self, p: chex.Array, e: chex.Array) -> chex.Array:
        """dP(e): a tangent vector at p viewed in R^N, which in the embedded representation is e itself."""
        self._require_tangent(p, e)
        return e

    def embedding_second_differential(self, p: chex.Array, X: chex.Array, Y: chex.Array) -> chex.Array:
        """D dP(X; Y): derivative along X of the tangent projection, applied to Y.
        Computed by forward-mode differentiation of the projection, so comparing against
        `second_fundamental_form` is an independent check of the Gauss formula."""
        self._require_tangent(p, X, Y)
        return jax.jvp(lambda q: self._project(q, Y), (p,), (X,))[1]

    def exp_map(self, p: chex.Array, X: chex.Array) -> chex.Array:
        """Riemannian exponential map. Raises a CutLocusError when X reaches the cut locus
        (length pi within any sphere factor)."""
        self._require_tangent(p, X)
        if _concrete(X):
            longest = float(jnp.max(jnp.linalg.norm(self._split(X), axis=-1)))
            if longest >= np.pi:
                raise CutLocusError(f"tangent vector of length {longest:.4f} reaches the cut locus (pi)")
        return self._exp_map(p, X)

    # ---- transport ----

    @partial(jax.jit, static_argnums=(0, 4))
    def parallel_transport(self, p: chex.Array, W: chex.Array, vectors: chex.Array, n_steps: int = 64) -> Tuple[chex.Array, chex.Array]:
        """Transports `vectors` (leading axis = vector index) along the geodesic t -> exp_p(tW), t in [0,1].

        The embedded transport equation is dV/dt = (D_{gamma'} P) V = S(gamma', V), integrated with RK4
        and re-projected every step.

        Returns:
        - (chex.Array, chex.Array): end point, transported vectors
        """
        h = 1.0 / n_steps

        def velocity(t):
            # geodesic velocity is the transport of W along itself
            return jax.jvp(lambda tau: self._exp_map(p, tau * W), (t,), (jnp.ones_like(t),))[1]

        def rhs(t, V):
            q = self._exp_map(p, t * W)
            return jax.jvp(lambda r: self._project(r, V), (q,), (velocity(t),))[1]

        def body(i, V):
            t = i * h
            k1 = rhs(t, V)
            k2 = rhs(t + h / 2, V + h / 2 * k1)
            k3 = rhs(t + h / 2, V + h / 2 * k2)
            k4 = rhs(t + h, V + h * k3)
            V = V + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            return self._project(self._exp_map(p, (t + h) * W), V)

        V = jax.lax.fori_loop(0, n_steps, body, vectors)
        return self._exp_map(p, W), V

    def curvature_transport_quotient(self, p: chex.Array, W: chex.Array, X: chex.Array, Y: chex.Array,
                                     Z: chex.Array, T: chex.Array, h: float = 1e-3) -> chex.Array:
        """Difference quotient of <R(X,Y)Z, T> along the geodesic in direction W with all four
        arguments parallel transported; approximates <(nabla_W R)(X,Y)Z, T>."""
        self._require_tangent(p, W, X, Y, Z, T)
        q, (Xh, Yh, Zh, Th) = self.parallel_transport(p, h * W, jnp.stack([X, Y, Z, T]))
        start = inner(self._curvature(p, X, Y, Z), T)
        end = inner(self._curvature(q, Xh, Yh, Zh), Th)
        return (end - start) / h
