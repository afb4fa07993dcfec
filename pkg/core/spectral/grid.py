from functools import cached_property, partial
from typing import Dict, Tuple

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.errors import GridError


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class Grid2:
    """Periodic square grid of side `side_length` with `n_points_per_side` points per side,
    standing in for R^2 at desk scale.

    Fields are arrays whose two leading axes are the grid axes (x_1, x_2); any trailing axes
    (ambient components, frame indices, ...) are carried along untouched by every operation.

    Hashable, so it can be passed as a static argument to jitted functions.
    """

    def __init__(self, n_points_per_side: int, side_length: float):
        """
        Args:
        - `n_points_per_side`: number of grid points per side (power of two, >= 8)
        - `side_length`: physical side length L of the periodic box
        """
        if not isinstance(n_points_per_side, (int, np.integer)) or n_points_per_side < 8 \
                or not _is_power_of_two(int(n_points_per_side)):
            raise GridError(f"n_points_per_side must be a power of two >= 8, got {n_points_per_side}")
        if not side_length > 0:
            raise GridError(f"side_length must be positive, got {side_length}")
        self.n_points_per_side = int(n_points_per_side)
        self.side_length = float(side_length)

    def __hash__(self):
        return hash((self.n_points_per_side, self.side_length))

    def __eq__(self, other):
        return isinstance(other, Grid2) and \
            (self.n_points_per_side, self.side_length) == (other.n_points_per_side, other.side_length)

    def __repr__(self):
        return f"Grid2(n_points_per_side={self.n_points_per_side}, side_length={self.side_length})"

    def get_config(self) -> Dict:
        """Returns the configuration of the grid. Used for manifests."""
        return {
            'n_points_per_side': self.n_points_per_side,
            'side_length': self.side_length,
        }

    @property
    def n(self) -> int:
        return self.n_points_per_side

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n, self.n)

    @property
    def dx(self) -> float:
        return self.side_length / self.n

    @property
    def cell_area(self) -> float:
        return self.dx ** 2

    @property
    def nyquist(self) -> float:
        """largest represented wavenumber along one axis"""
        return np.pi * self.n / self.side_length

    @property
    def xi_min(self) -> float:
        """lowest nonzero wavenumber magnitude"""
        return 2 * np.pi / self.side_length

    @cached_property
    def coordinates(self) -> np.ndarray:
        """cell-centred 1-d coordinates on [-L/2, L/2)"""
        return -self.side_length / 2 + np.arange(self.n) * self.dx

    @cached_property
    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        return tuple(np.meshgrid(self.coordinates, self.coordinates, indexing='ij'))

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """xi = 2*pi*(signed index)/L in FFT ordering; the Nyquist index is self-paired."""
        return 2 * np.pi * np.fft.fftfreq(self.n, d=self.dx)

    @cached_property
    def derivative_wavenumbers(self) -> np.ndarray:
        """wavenumbers for odd-order derivatives: the self-paired Nyquist mode is zeroed,
        which keeps the table antisymmetric under index negation"""
        k = self.wavenumbers.copy()
        k[self.n // 2] = 0.0
        return k

    @cached_property
    def xi(self) -> Tuple[np.ndarray, np.ndarray]:
        return tuple(np.meshgrid(self.wavenumbers, self.wavenumbers, indexing='ij'))

    @cached_property
    def xi_squared(self) -> np.ndarray:
        xi1, xi2 = self.xi
        return xi1 ** 2 + xi2 ** 2

    @cached_property
    def xi_norm(self) -> np.ndarray:
        return np.sqrt(self.xi_squared)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """2/3-rule mask, applied to nonlinear terms by downstream modules"""
        xi1, xi2 = self.xi
        cutoff = 2.0 / 3.0 * self.nyquist
        return ((np.abs(xi1) <= cutoff) & (np.abs(xi2) <= cutoff)).astype(np.float64)

    def check_field(self, f: chex.Array) -> None:
        """Raises a GridError if the leading axes of `f` do not match the grid."""
        if f.ndim < 2 or tuple(f.shape[:2]) != self.shape:
            raise GridError(f"field of shape {tuple(f.shape)} does not match grid {self.shape}")

    def _broadcast(self, multiplier: chex.Array, f: chex.Array) -> chex.Array:
        return jnp.asarray(multiplier).reshape(multiplier.shape + (1,) * (f.ndim - 2))

    @partial(jax.jit, static_argnums=(0,))
    def dft_forward(self, f: chex.Array) -> chex.Array:
        """Discrete Fourier transform over the two grid axes (unnormalised forward convention).

        Args:
        - `f`: real field, leading axes (n, n)

        Returns:
        - (chex.Array): complex coefficients, same shape
        """
        self.check_field(f)
        return jnp.fft.fft2(f, axes=(0, 1))

    @partial(jax.jit, static_argnums=(0,))
    def dft_inverse(self, f_hat: chex.Array) -> chex.Array:
        """Inverse of `dft_forward`, real part."""
        self.check_field(f_hat)
        return jnp.fft.ifft2(f_hat, axes=(0, 1)).real

    @partial(jax.jit, static_argnums=(0,))
    def apply_multiplier(self, f: chex.Array, multiplier: chex.Array) -> chex.Array:
        """Applies a real Fourier multiplier of shape (n, n) to a field."""
        self.check_field(f)
        f_hat = jnp.fft.fft2(f, axes=(0, 1))
        return jnp.fft.ifft2(self._broadcast(multiplier, f) * f_hat, axes=(0, 1)).real

    @partial(jax.jit, static_argnums=(0, 2, 3))
    def derivative(self, f: chex.Array, axis: int, order: int = 1) -> chex.Array:
        """Spectral derivative of the given order along grid axis 0 or 1."""
        self.check_field(f)
        k = self.derivative_wavenumbers if order % 2 else self.wavenumbers
        k1, k2 = np.meshgrid(k, k, indexing='ij')
        symbol = (1j * (k1 if axis == 0 else k2)) ** order
        f_hat = jnp.fft.fft2(f, axes=(0, 1))
        return jnp.fft.ifft2(self._broadcast(symbol, f) * f_hat, axes=(0, 1)).real

    @partial(jax.jit, static_argnums=(0,))
    def gradient(self, f: chex.Array) -> Tuple[chex.Array, chex.Array]:
        """Returns (d_1 f, d_2 f)."""
        self.check_field(f)
        k = self.derivative_wavenumbers
        k1, k2 = np.meshgrid(k, k, indexing='ij')
        f_hat = jnp.fft.fft2(f, axes=(0, 1))
        d1 = jnp.fft.ifft2(self._broadcast(1j * k1, f) * f_hat, axes=(0, 1)).real
        d2 = jnp.fft.ifft2(self._broadcast(1j * k2, f) * f_hat, axes=(0, 1)).real
        return d1, d2

    @partial(jax.jit, static_argnums=(0,))
    def divergence(self, g1: chex.Array, g2: chex.Array) -> chex.Array:
        return self.derivative(g1, 0) + self.derivative(g2, 1)

    @partial(jax.jit, static_argnums=(0,))
    def laplacian(self, f: chex.Array) -> chex.Array:
        """Spectral Laplacian, exact on band-limited fields."""
        return self.apply_multiplier(f, -self.xi_squared)

    @partial(jax.jit, static_argnums=(0,))
    def dealias(self, f: chex.Array) -> chex.Array:
        return self.apply_multiplier(f, self.dealias_mask)

    @partial(jax.jit, static_argnums=(0,))
    def _heat_semigroup(self, f: chex.Array, s: float) -> chex.Array:
        return self.apply_multiplier(f, jnp.exp(-s * self.xi_squared))

    def heat_semigroup(self, f: chex.Array, s: float) -> chex.Array:
        """e^{s Laplacian} f: multiplies mode xi by exp(-s|xi|^2).

        Args:
        - `f`: field
        - `s`: heat time, must be nonnegative

        Returns:
        - (chex.Array): smoothed field
        """
        if not isinstance(s, jax.core.Tracer) and float(s) < 0:
            raise GridError(f"heat semigroup needs s >= 0, got {s}")
        return self._heat_semigroup(f, s)

    @partial(jax.jit, static_argnums=(0, 2))
    def derivative_norm(self, f: chex.Array, order: int) -> chex.Array:
        """L^2 norm of the full `order`-th derivative tensor, sum_{|a|=order} |d^a f|^2 = |xi|^{2 order}|f_hat|^2,
        summed over trailing components."""
        self.check_field(f)
        f_hat = jnp.fft.fft2(f, axes=(0, 1))
        weight = self._broadcast(self.xi_squared ** order, f)
        total = jnp.sum(weight * jnp.abs(f_hat) ** 2)
        return jnp.sqrt(total * self.cell_area / self.n ** 2)

    @partial(jax.jit, static_argnums=(0,))
    def pointwise_magnitude(self, f: chex.Array) -> chex.Array:
        """Euclidean magnitude over the trailing axes, shape (n, n)."""
        self.check_field(f)
        if f.ndim == 2:
            return jnp.abs(f)
        return jnp.sqrt(jnp.sum(f.reshape(self.shape + (-1,)) ** 2, axis=-1))

    @partial(jax.jit, static_argnums=(0,))
    def spatial_norms(self, f: chex.Array) -> Dict[str, chex.Array]:
        """L^2, L^4 and L^inf norms with grid-sum x cell-area quadrature.

        Returns:
        - (Dict[str, chex.Array]): keys 'L2', 'L4', 'Linf'
        """
        m = self.pointwise_magnitude(f)
        return {
            'L2': jnp.sqrt(jnp.sum(m ** 2) * self.cell_area),
            'L4': (jnp.sum(m ** 4) * self.cell_area) ** 0.25,
            'Linf': jnp.max(m),
        }

    @partial(jax.jit, static_argnums=(0,))
    def spectral_l2(self, f: chex.Array) -> chex.Array:
        """L^2 norm evaluated on the spectrum (Parseval)."""
        f_hat = self.dft_forward(f)
        return jnp.sqrt(jnp.sum(jnp.abs(f_hat) ** 2) * self.cell_area / self.n ** 2)
