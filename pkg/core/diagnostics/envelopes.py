from fractions import Fraction
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import chex
import numpy as np

from core.errors import EnvelopeError
from core.spectral.littlewood_paley import LittlewoodPaley

DEFAULT_DELTA = 1.0 / 800.0
SIGMA_STEP = Fraction(1, 8)
SIGMA_MAX = Fraction(2)
SIGMA_SHIFT = Fraction(3, 8)
# the first iterate switches branches at these exact rationals
FIRST_BREAK = Fraction(99, 100)
FIRST_TOP = Fraction(5, 4)
MAX_ITERATE = 4

SigmaLike = Union[Fraction, float, int, str]


@chex.dataclass(frozen=True)
class FrequencyEnvelope:
    """Slowly varying sequence over the dyadic shells of a grid.
    - `shells`: shell indices k, increasing
    - `values`: envelope value per shell
    - `delta`: order of slow variation
    - `sigma`: regularity index the sequence was built for
    """
    shells: np.ndarray
    values: np.ndarray
    delta: float
    sigma: float

    @property
    def ell2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.values ** 2)))

    def slow_variation_defect(self) -> float:
        """max over pairs of c_j / (2^(delta |l - j|) c_l) - 1; nonpositive up to rounding for an envelope"""
        k = self.shells.astype(np.float64)
        bound = 2.0 ** (self.delta * np.abs(k[:, None] - k[None, :])) * self.values[None, :]
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = np.where(bound > 0, self.values[:, None] / bound, np.where(self.values[:, None] > 0, np.inf, 0.0))
        return float(np.max(ratio) - 1.0)


def envelope_of_sequence(a: Sequence[float], delta: float = DEFAULT_DELTA,
                         shells: Optional[Sequence[int]] = None, sigma: float = 0.0) -> FrequencyEnvelope:
    """a~_j = max_j' a_j' 2^(-delta |j - j'|) over the given shells.

    Evaluated as a forward and a backward max-sweep with the single factor 2^(-delta), which
    reproduces the closed-form sup and makes domination and idempotency hold exactly in
    floating point.

    Args:
    - `a`: nonnegative finite sequence over consecutive shells
    - `delta`: envelope order
    - `shells`: (optional) shell indices, defaults to 0..len(a)-1
    - `sigma`: regularity index recorded on the result

    Returns:
    - (FrequencyEnvelope): the envelope
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise EnvelopeError(f"expected a one-dimensional sequence, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise EnvelopeError("sequence has non-finite entries")
    if np.any(a < 0):
        raise EnvelopeError(f"sequence has negative entries (min {a.min():.3e})")
    if not delta > 0:
        raise EnvelopeError(f"delta must be positive, got {delta}")
    shells = np.arange(a.size) if shells is None else np.asarray(shells)
    decay = 2.0 ** (-delta)
    forward = a.copy()
    for j in range(1, a.size):
        forward[j] = max(forward[j], forward[j - 1] * decay)
    values = forward.copy()
    for j in range(a.size - 2, -1, -1):
        values[j] = max(values[j], values[j + 1] * decay)
    return FrequencyEnvelope(shells=shells, values=values, delta=float(delta), sigma=float(sigma))


def envelope_sum_constant(a: Sequence[float], delta: float = DEFAULT_DELTA) -> float:
    """Measured C(delta) in sum a~^2 <= C sum a^2."""
    a = np.asarray(a, dtype=np.float64)
    total = float(np.sum(a ** 2))
    if total == 0.0:
        return 1.0
    return float(np.sum(envelope_of_sequence(a, delta).values ** 2)) / total


def shell_weights(lp: LittlewoodPaley, sigma: float) -> np.ndarray:
    k = np.array(list(lp.shells), dtype=np.float64)
    return 2.0 ** ((sigma + 1.0) * k)


def field_envelope(lp: LittlewoodPaley, values: chex.Array, sigma: float = 0.0,
                   delta: float = DEFAULT_DELTA, time_axis: bool = False) -> FrequencyEnvelope:
    """Envelope of 2^(sigma k + k) ||P_k u||_{L^2} over the grid's shells.

    Args:
    - `lp`: Littlewood-Paley decomposition of the grid
    - `values`: field of shape (n, n[, N]), or (T, n, n[, N]) with `time_axis`
    - `sigma`: regularity index
    - `delta`: envelope order
    - `time_axis`: take the sup over a leading time axis (L^inf_t L^2_x shell norms)

    Returns:
    - (FrequencyEnvelope): the envelope
    """
    if time_axis:
        norms = np.max(np.stack([np.asarray(lp.shell_l2_norms(v)) for v in values]), axis=0)
    else:
        norms = np.asarray(lp.shell_l2_norms(values))
    return envelope_of_sequence(shell_weights(lp, sigma) * norms, delta, shells=np.array(list(lp.shells)), sigma=sigma)


def as_sigma(sigma: SigmaLike) -> Fraction:
    """Exact lattice value of sigma; raises EnvelopeError off the 1/8-lattice or outside [0, 2]."""
    value = Fraction(sigma)
    if value < 0 or value > SIGMA_MAX or (value / SIGMA_STEP).denominator != 1:
        raise EnvelopeError(f"sigma={sigma} is not on the lattice {SIGMA_STEP} * [0, {int(SIGMA_MAX / SIGMA_STEP)}]")
    return value


def sigma_lattice() -> Tuple[Fraction, ...]:
    return tuple(SIGMA_STEP * i for i in range(int(SIGMA_MAX / SIGMA_STEP) + 1))


@chex.dataclass(frozen=True)
class EnvelopeFamily:
    """Envelopes gamma_k(sigma) on the sigma-lattice.
    - `shells`: shell indices
    - `sigmas`: lattice values (exact rationals)
    - `values`: array of shape (len(sigmas), len(shells))
    - `delta`: envelope order
    - `iterate`: iteration order j of the family
    """
    shells: np.ndarray
    sigmas: Tuple[Fraction, ...]
    values: np.ndarray
    delta: float
    iterate: int

    def at(self, sigma: SigmaLike) -> np.ndarray:
        value = as_sigma(sigma)
        if value not in self.sigmas:
            raise EnvelopeError(f"sigma={value} outside the domain of the order-{self.iterate} iterate")
        return self.values[self.sigmas.index(value)]


def envelope_family(lp: LittlewoodPaley, values: chex.Array, delta: float = DEFAULT_DELTA,
                    time_axis: bool = False) -> EnvelopeFamily:
    """gamma_k(sigma) of a field for every sigma on the lattice."""
    lattice = sigma_lattice()
    rows = [field_envelope(lp, values, float(s), delta, time_axis).values for s in lattice]
    return EnvelopeFamily(shells=np.array(list(lp.shells)), sigmas=lattice, values=np.stack(rows), delta=delta, iterate=0)


def iterate_domain_top(j: int) -> Fraction:
    """largest sigma at which gamma^(j) is defined"""
    if j == 0:
        return SIGMA_MAX
    if j == 1:
        return FIRST_TOP
    return Fraction(j + 4, 4)


def iterated_value(gamma: EnvelopeFamily, j: int, sigma: SigmaLike, _cache: Optional[Dict] = None) -> np.ndarray:
    """gamma^(j)_k(sigma) by the iterated-envelope recursion.

    j = 0 is gamma itself. For j = 1 the first branch covers sigma <= 99/100 and the second
    (99/100, 5/4]; for j >= 2 they are sigma <= (j+3)/4 and ((j+3)/4, (j+4)/4]. The second branch is
    gamma(sigma) + gamma^(j-1)(sigma - 3/8) * gamma(3/8).
    """
    if gamma.iterate != 0:
        raise EnvelopeError("the recursion starts from the base family (iterate 0)")
    if not 0 <= j <= MAX_ITERATE:
        raise EnvelopeError(f"iterate order must be in 0..{MAX_ITERATE}, got {j}")
    sigma = as_sigma(sigma)
    if sigma > iterate_domain_top(j):
        raise EnvelopeError(f"sigma={sigma} above the domain top {iterate_domain_top(j)} of iterate {j}")
    cache = {} if _cache is None else _cache
    key = (j, sigma)
    if key in cache:
        return cache[key]
    if j == 0:
        result = gamma.at(sigma)
    else:
        split = FIRST_BREAK if j == 1 else Fraction(j + 3, 4)
        if sigma <= split:
            result = iterated_value(gamma, j - 1, sigma, cache)
        else:
            result = gamma.at(sigma) + iterated_value(gamma, j - 1, sigma - SIGMA_SHIFT, cache) * gamma.at(SIGMA_SHIFT)
    cache[key] = result
    return result


def envelope_iterate(gamma: EnvelopeFamily, j: int) -> EnvelopeFamily:
    """gamma^(j) on every lattice sigma in its domain; the result carries order delta / 2^j."""
    cache: Dict = {}
    sigmas = tuple(s for s in gamma.sigmas if s <= iterate_domain_top(j))
    values = np.stack([iterated_value(gamma, j, s, cache) for s in sigmas])
    return EnvelopeFamily(shells=gamma.shells, sigmas=sigmas, values=values, delta=gamma.delta / 2 ** j, iterate=j)


def envelope_rows(family: EnvelopeFamily) -> Iterable[Tuple[int, float, float, float, int]]:
    """Rows (k, sigma, value, delta, iterate_j) for the envelope CSV."""
    for s, row in zip(family.sigmas, family.values):
        for k, v in zip(family.shells, row):
            yield int(k), float(s), float(v), family.delta, family.iterate
