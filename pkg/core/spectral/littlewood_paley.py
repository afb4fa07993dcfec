import math
import warnings
from functools import lru_cache, partial
from typing import Dict, Tuple

import chex
import jax
import jax.numpy as jnp
import numpy as np

from core.errors import GridError
from core.spectral.grid import Grid2

# the cutoff equals one on |z| <= CUTOFF_INNER and vanishes on |z| >= CUTOFF_OUTER
CUTOFF_INNER = 5.0 / 4.0
CUTOFF_OUTER = 8.0 / 5.0


def _smooth_step(t: np.ndarray) -> np.ndarray:
    positive = t > 0
    return np.where(positive, np.exp(-1.0 / np.where(positive, t, 1.0)), 0.0)


def smooth_cutoff(z) -> np.ndarray:
    """Smooth, even, radially nonincreasing cutoff: 1 on |z| <= 5/4, 0 on |z| >= 8/5,
    C^infinity transition in between.

    Args:
    - `z`: real scalar or array

    Returns:
    - (np.ndarray): cutoff values in [0, 1]
    """
    z = np.abs(np.asarray(z, dtype=np.float64))
    t = np.clip((CUTOFF_OUTER - z) / (CUTOFF_OUTER - CUTOFF_INNER), 0.0, 1.0)
    rising, falling = _smooth_step(t), _smooth_step(1.0 - t)
    return rising / (rising + falling)


def shell_symbol(xi_norm, k: int) -> np.ndarray:
    """chi_k(xi) = chi(xi / 2^k) - chi(xi / 2^(k-1)), supported on 2^(k-1)*5/4 <= |xi| <= 2^k * 8/5."""
    return smooth_cutoff(xi_norm / 2.0 ** k) - smooth_cutoff(xi_norm / 2.0 ** (k - 1))


def low_symbol(xi_norm, k: int) -> np.ndarray:
    """symbol of P_{<=k}: chi(|xi| / 2^k)"""
    return smooth_cutoff(xi_norm / 2.0 ** k)


class LittlewoodPaley:
    """Dyadic frequency decomposition on a `Grid2`.

    Shell k collects frequencies |xi| ~ 2^k. The decomposition is restricted to the shells
    that can carry energy on the grid: `k_min` is the first shell whose support reaches the
    lowest nonzero wavenumber, `k_max` the last shell whose support starts below the corner
    wavenumber. Summing all shells in range recovers the mean-free part of a field.
    """

    def __init__(self, grid: Grid2):
        self.grid = grid
        corner = math.sqrt(2.0) * grid.nyquist
        self.k_min = int(math.floor(math.log2(grid.xi_min / CUTOFF_OUTER))) + 1
        self.k_max = int(math.ceil(math.log2(corner / CUTOFF_INNER)))

    def __hash__(self):
        return hash(('lp', self.grid))

    def __eq__(self, other):
        return isinstance(other, LittlewoodPaley) and self.grid == other.grid

    @property
    def shell_range(self) -> Tuple[int, int]:
        return (self.k_min, self.k_max)

    @property
    def shells(self) -> range:
        return range(self.k_min, self.k_max + 1)

    def is_truncated(self, k: int) -> bool:
        """True if the grid cuts off part of the support of shell k."""
        return 2.0 ** (k + 1) > self.grid.nyquist

    def _check_shell(self, k: int) -> None:
        if not isinstance(k, (int, np.integer)):
            raise GridError(f"shell index must be an integer, got {k!r}")
        if k < self.k_min or k > self.k_max:
            raise GridError(f"shell {k} outside the grid range [{self.k_min}, {self.k_max}]")
        if self.is_truncated(k):
            warnings.warn(f"shell {k} is truncated by the grid (nyquist {self.grid.nyquist:.4f})")

    @lru_cache(maxsize=None)
    def shell_multiplier(self, k: int) -> np.ndarray:
        return shell_symbol(self.grid.xi_norm, k)

    @lru_cache(maxsize=None)
    def low_multiplier(self, k: int) -> np.ndarray:
        return low_symbol(self.grid.xi_norm, k)

    @partial(jax.jit, static_argnums=(0, 2))
    def _project(self, f: chex.Array, k: int) -> chex.Array:
        return self.grid.apply_multiplier(f, self.shell_multiplier(k))

    @partial(jax.jit, static_argnums=(0, 2))
    def _project_low(self, f: chex.Array, k: int) -> chex.Array:
        return self.grid.apply_multiplier(f, self.low_multiplier(k))

    def project(self, f: chex.Array, k: int) -> chex.Array:
        """P_k f, the shell-k piece of f."""
        self._check_shell(k)
        return self._project(f, int(k))

    def project_low(self, f: chex.Array, k: int) -> chex.Array:
        """P_{<=k} f. For k past the top shell every represented frequency is kept."""
        if not isinstance(k, (int, np.integer)):
            raise GridError(f"shell index must be an integer, got {k!r}")
        return self._project_low(f, int(k))

    def project_high(self, f: chex.Array, k: int) -> chex.Array:
        """P_{>k} f = f - P_{<=k} f."""
        return f - self.project_low(f, k)

    @partial(jax.jit, static_argnums=(0,))
    def decompose(self, f: chex.Array) -> chex.Array:
        """All shells at once, stacked along a new leading axis ordered k_min..k_max."""
        self.grid.check_field(f)
        f_hat = jnp.fft.fft2(f, axes=(0, 1))
        symbols = np.stack([self.shell_multiplier(k) for k in self.shells])
        symbols = jnp.asarray(symbols.reshape(symbols.shape + (1,) * (f.ndim - 2)))
        return jnp.fft.ifft2(symbols * f_hat[None], axes=(1, 2)).real

    @partial(jax.jit, static_argnums=(0,))
    def shell_l2_norms(self, f: chex.Array) -> chex.Array:
        """||P_k f||_{L^2} for every shell, computed on the spectrum."""
        self.grid.check_field(f)
        f_hat = jnp.fft.fft2(f, axes=(0, 1))
        power = jnp.abs(f_hat) ** 2
        if power.ndim > 2:
            power = jnp.sum(power.reshape(self.grid.shape + (-1,)), axis=-1)
        symbols = jnp.asarray(np.stack([self.shell_multiplier(k) for k in self.shells]))
        total = jnp.sum(symbols ** 2 * power[None], axis=(1, 2))
        return jnp.sqrt(total * self.grid.cell_area / self.grid.n ** 2)

    def shell_norms(self, f: chex.Array) -> Dict[int, float]:
        """Shell norms keyed by shell index."""
        values = np.asarray(self.shell_l2_norms(f))
        return {k: float(v) for k, v in zip(self.shells, values)}

    @partial(jax.jit, static_argnums=(0,))
    def out_of_range_residual(self, f: chex.Array) -> chex.Array:
        """L^inf size of f - mean(f) - sum_k P_k f; vanishes up to roundoff."""
        mean = jnp.mean(f, axis=(0, 1), keepdims=True)
        return jnp.max(jnp.abs(f - mean - jnp.sum(self.decompose(f), axis=0)))
