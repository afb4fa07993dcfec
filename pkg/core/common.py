import math
from typing import Dict, Optional, Tuple

import chex
import jax
import jax.numpy as jnp
import numpy as np
import wandb

# samples per local interpolant of `tail_integral`
STENCIL = 4


def tail_integral(values: chex.Array, s: chex.Array) -> chex.Array:
    """Cumulative integral from each sample to the last one along axis 0,
    I[l] = int_{s_l}^{s_last} values ds, with I[last] = 0.

    Every interval integrates the cubic through the four nearest samples, so the rule is fourth order
    on nonuniform grids; fewer than four samples fall back to the trapezoid rule.

    Args:
    - `values`: samples, leading axis indexed like `s`
    - `s`: increasing sample positions (concrete)

    Returns:
    - (chex.Array): tail integrals, same shape as `values`
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] < STENCIL:
        ds = jnp.asarray(np.diff(s)).reshape((-1,) + (1,) * (values.ndim - 1))
        pieces = 0.5 * ds * (values[1:] + values[:-1])
    else:
        weights, stencils = interval_weights(s)
        pieces = jnp.einsum('lk,lk...->l...', jnp.asarray(weights), values[stencils])
    tail = jnp.cumsum(pieces[::-1], axis=0)[::-1]
    return jnp.concatenate([tail, jnp.zeros_like(values[:1])], axis=0)


def interval_weights(s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Quadrature weights of the local cubic rule behind `tail_integral`.

    Interval [s_l, s_{l+1}] uses the samples s_{m}, ..., s_{m+3} with m = clip(l - 1, 0, L - 4); the
    interpolant is integrated with two-point Gauss–Legendre, which is exact for cubics.

    Returns:
    - (np.ndarray, np.ndarray): weights and sample indices, both of shape (L - 1, 4)
    """
    n = s.shape[0]
    start = np.clip(np.arange(n - 1) - 1, 0, n - STENCIL)
    stencils = start[:, None] + np.arange(STENCIL)
    nodes = s[stencils]
    h = np.diff(s)
    mid = 0.5 * (s[1:] + s[:-1])
    offset = 0.5 * h / math.sqrt(3.0)
    weights = np.zeros((n - 1, STENCIL))
    for x in (mid - offset, mid + offset):
        for k in range(STENCIL):
            basis = np.ones(n - 1)
            for m in range(STENCIL):
                if m != k:
                    basis *= (x - nodes[:, m]) / (nodes[:, k] - nodes[:, m])
            weights[:, k] += 0.5 * h * basis
    return weights, stencils


def realify(phi: chex.Array) -> chex.Array:
    """(..., n) complex -> (..., 2n) real with psi^{2b-1} = Re phi^b, psi^{2b} = Im phi^b."""
    return jnp.stack([phi.real, phi.imag], axis=-1).reshape(phi.shape[:-1] + (2 * phi.shape[-1],))


def complexify(psi: chex.Array) -> chex.Array:
    """Inverse of `realify`."""
    pairs = psi.reshape(psi.shape[:-1] + (psi.shape[-1] // 2, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


def multiply_by_i(psi: chex.Array) -> chex.Array:
    """Multiplication by sqrt(-1) on realified components: (x, y) -> (-y, x) in every pair."""
    pairs = psi.reshape(psi.shape[:-1] + (psi.shape[-1] // 2, 2))
    return jnp.stack([-pairs[..., 1], pairs[..., 0]], axis=-1).reshape(psi.shape)


def log_metrics(stage: str, index: int, metrics: Dict, use_wandb: bool = False, step: Optional[int] = None) -> None:
    """Logs metrics to console and, optionally, wandb.

    Args:
    - `stage`: pipeline stage name
    - `index`: level / step / stage index
    - `metrics`: dictionary of scalar metrics
    - `use_wandb`: also log to the active wandb run
    - `step`: explicit wandb step
    """
    metrics_str = {k: f"{_scalar(v):.4e}" for k, v in metrics.items()}
    print(f"{stage} {index}: {metrics_str}")
    if use_wandb:
        wandb.log({f"{stage}/{k}": _scalar(v) for k, v in metrics.items()}, step=step)


def _scalar(v) -> float:
    if isinstance(v, (jax.Array, np.ndarray)):
        return float(v.item())
    return float(v)


def nonuniform_derivative(values: chex.Array, s: chex.Array) -> chex.Array:
    """Derivative along axis 0 on a nonuniform grid: second-order centred weights inside,
    first-order one-sided differences at the two ends.

    Args:
    - `values`: samples, leading axis indexed like `s`
    - `s`: strictly increasing sample positions (at least 3)

    Returns:
    - (chex.Array): derivative estimates, same shape as `values`
    """
    expand = lambda x: x.reshape((-1,) + (1,) * (values.ndim - 1))
    h1 = expand(s[1:-1] - s[:-2])
    h2 = expand(s[2:] - s[1:-1])
    interior = (h1 ** 2 * values[2:] - h2 ** 2 * values[:-2] + (h2 ** 2 - h1 ** 2) * values[1:-1]) / (h1 * h2 * (h1 + h2))
    first = (values[1] - values[0]) / (s[1] - s[0])
    last = (values[-1] - values[-2]) / (s[-1] - s[-2])
    return jnp.concatenate([first[None], interior, last[None]], axis=0)
