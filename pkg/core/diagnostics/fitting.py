import math
from functools import partial
from typing import Optional

import chex
import jax
import jax.numpy as jnp
import numpy as np
import optax

from core.errors import FitError

MIN_SAMPLES = 6
# a fit must span at least two dyadic s-blocks [2^(2j-1), 2^(2j+1)]
MIN_SPAN_OCTAVES = 4.0
# samples this far below the profile maximum are roundoff and are left out of the fit
NOISE_FLOOR = 1e-12
LBFGS_ITERATIONS = 100


@chex.dataclass(frozen=True)
class DecayFit:
    """Least-squares fit of a profile to A (1 + s 2^(2k))^(-M).
    - `exponent`: fitted M (nan for a zero profile)
    - `amplitude`: fitted A
    - `residual`: relative RMS residual of the fit
    - `n_samples`: samples used
    """
    exponent: float
    amplitude: float
    residual: float
    n_samples: int


@chex.dataclass(frozen=True)
class SlopeFit:
    """Least-squares line through (log s, log y).
    - `slope`: fitted slope
    - `intercept`: fitted intercept
    - `n_samples`: samples used
    """
    slope: float
    intercept: float
    n_samples: int


def log_log_slope(s: np.ndarray, y: np.ndarray) -> SlopeFit:
    s, y = np.asarray(s, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(np.log(s), np.log(y), 1)
    return SlopeFit(slope=float(slope), intercept=float(intercept), n_samples=int(s.size))


@partial(jax.jit, static_argnums=(3,))
def _refine(params: chex.Array, x: chex.Array, y: chex.Array, iterations: int) -> chex.Array:
    def loss(p):
        model = jnp.exp(p[0] - p[1] * x)
        return jnp.mean(((model - y) / y) ** 2)

    opt = optax.lbfgs()
    value_and_grad = optax.value_and_grad_from_state(loss)

    def step(carry, _):
        p, state = carry
        value, grad = value_and_grad(p, state=state)
        updates, state = opt.update(grad, state, p, value=value, grad=grad, value_fn=loss)
        return (optax.apply_updates(p, updates), state), value

    (params, _), _ = jax.lax.scan(step, (params, opt.init(params)), None, length=iterations)
    return params


def decay_fit(s: np.ndarray, profile: np.ndarray, k: int, window: Optional[float] = None) -> DecayFit:
    """Fits profile(s) ~ A (1 + s 2^(2k))^(-M).

    A log-linear regression gives the starting point; L-BFGS then minimises the relative
    squared residual.

    Args:
    - `s`: heat times
    - `profile`: nonnegative values at those times
    - `k`: shell index setting the time scale 2^(-2k)
    - `window`: (optional) fit only samples with s 2^(2k) <= window

    Returns:
    - (DecayFit): fitted exponent, amplitude and residual
    """
    s, profile = np.asarray(s, dtype=np.float64), np.asarray(profile, dtype=np.float64)
    if s.shape != profile.shape or s.ndim != 1:
        raise FitError(f"s and profile must be matching 1-d arrays, got {s.shape} and {profile.shape}")
    if np.any(profile < 0) or not np.all(np.isfinite(profile)):
        raise FitError("profile must be finite and nonnegative")
    if window is not None:
        inside = s * 4.0 ** k <= window
        s, profile = s[inside], profile[inside]
    peak = float(np.max(profile)) if profile.size else 0.0
    if peak == 0.0:
        return DecayFit(exponent=math.nan, amplitude=0.0, residual=0.0, n_samples=int(profile.size))
    keep = profile > NOISE_FLOOR * peak
    s, profile = s[keep], profile[keep]
    if s.size < MIN_SAMPLES:
        raise FitError(f"need at least {MIN_SAMPLES} samples above the noise floor, got {s.size}")
    positive = s[s > 0]
    if positive.size == 0 or math.log2(positive.max() / positive.min()) < MIN_SPAN_OCTAVES:
        raise FitError("profile must span at least two dyadic s-blocks")

    x = np.log1p(s * 4.0 ** k)
    slope, intercept = np.polyfit(x, np.log(profile), 1)
    params = _refine(jnp.array([intercept, -slope]), jnp.asarray(x), jnp.asarray(profile), LBFGS_ITERATIONS)

    def relative_residual(log_amplitude, exponent):
        model = np.exp(log_amplitude - exponent * x)
        return float(np.sqrt(np.mean(((model - profile) / profile) ** 2)))

    log_amplitude, exponent = float(intercept), float(-slope)
    residual = relative_residual(log_amplitude, exponent)
    refined = relative_residual(float(params[0]), float(params[1]))
    # the line search can stall on an already exact start
    if math.isfinite(refined) and refined < residual:
        log_amplitude, exponent, residual = float(params[0]), float(params[1]), refined
    return DecayFit(exponent=exponent, amplitude=math.exp(log_amplitude), residual=residual, n_samples=int(s.size))
