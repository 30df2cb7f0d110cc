"""Tweedie exponential dispersion densities, samplers and deviances."""

from typing import Optional, Union

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from app.config import Config
from app.models.errors import DomainError, SeriesConvergenceError
from app.models.params import TweedieSpec

ArrayLike = Union[float, np.ndarray]

# Upper bound on elements x window width held in memory by the series
_SERIES_CELLS = 2_000_000


def variance(mu: ArrayLike, spec: TweedieSpec) -> np.ndarray:
    """Variance phi * mu**p of a Tweedie member."""
    mu = np.asarray(mu, dtype=float)
    if spec.p == 0.0:
        return np.full_like(mu, spec.phi)
    if np.any(mu <= 0):
        raise DomainError("Tweedie mean must be positive when p > 0")
    return spec.phi * mu**spec.p


def log_pdf(y: ArrayLike, mu: ArrayLike, spec: TweedieSpec) -> np.ndarray:
    """
    Log-density of y under Tweedie(mu, phi, p).

    Args:
        y: Observations
        mu: Means, broadcast against y
        spec: Power and dispersion

    Returns:
        np.ndarray: Elementwise log-density

    Raises:
        DomainError: If y or mu fall outside the support for this p
        SeriesConvergenceError: If the compound Poisson series hits its term cap
    """
    return tweedie_log_pdf(y, mu, spec.phi, spec.p)


def gaussian_log_pdf(y: ArrayLike, mean: ArrayLike, var: ArrayLike) -> np.ndarray:
    """Normal log-density with the given variance."""
    y, mean, var = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, mean, var)))
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * (y - mean) ** 2 / var


def tweedie_log_pdf(
    y: ArrayLike,
    mu: ArrayLike,
    phi: ArrayLike,
    p: ArrayLike,
    drop: Optional[float] = None,
    max_terms: Optional[int] = None,
) -> np.ndarray:
    """
    Elementwise Tweedie log-density with per-element phi and p.

    p may differ between elements (one value per particle, say); each
    element is routed to the normal, lattice Poisson, compound Poisson-gamma
    or gamma form by its own p.
    """
    y, mu, phi, p = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (y, mu, phi, p))
    )
    out = np.empty(y.shape, dtype=float)

    if np.any(phi <= 0):
        raise DomainError("dispersion must be positive")
    gaussian = p == 0.0
    poisson = p == 1.0
    gamma = p == 2.0
    compound = (p > 1.0) & (p < 2.0)
    if not np.all(gaussian | poisson | gamma | compound):
        raise DomainError("unsupported Tweedie power; expected 0 or a value in [1, 2]")
    if np.any(~gaussian & ~(mu > 0)):
        raise DomainError("Tweedie mean must be positive when p > 0")
    if np.any(~gaussian & (y < 0)):
        raise DomainError("Tweedie observations must be nonnegative when p > 0")

    if gaussian.any():
        out[gaussian] = gaussian_log_pdf(y[gaussian], mu[gaussian], phi[gaussian])
    if poisson.any():
        out[poisson] = _poisson_log_pmf(y[poisson], mu[poisson], phi[poisson])
    if gamma.any():
        out[gamma] = _gamma_log_pdf(y[gamma], mu[gamma], phi[gamma])
    if compound.any():
        out[compound] = _compound_log_pdf(
            y[compound],
            mu[compound],
            phi[compound],
            p[compound],
            Config.TWEEDIE_DROP if drop is None else drop,
            Config.TWEEDIE_MAX_TERMS if max_terms is None else max_terms,
        )
    return out


def _poisson_log_pmf(y: np.ndarray, mu: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Overdispersed Poisson: y / phi ~ Poisson(mu / phi), defined on the lattice phi * N."""
    counts = y / phi
    rounded = np.round(counts)
    if np.any(np.abs(counts - rounded) > 1e-9 * np.maximum(1.0, rounded)):
        raise DomainError("p = 1 needs observations on the lattice phi * N")
    rate = mu / phi
    return xlogy(rounded, rate) - rate - gammaln(rounded + 1.0)


def _gamma_log_pdf(y: np.ndarray, mu: np.ndarray, phi: np.ndarray) -> np.ndarray:
    if np.any(y <= 0):
        raise DomainError("gamma observations must be positive")
    shape = 1.0 / phi
    ratio = y / (mu * phi)
    return shape * np.log(ratio) - ratio - np.log(y) - gammaln(shape)


def _compound_log_pdf(
    y: np.ndarray,
    mu: np.ndarray,
    phi: np.ndarray,
    p: np.ndarray,
    drop: float,
    max_terms: int,
) -> np.ndarray:
    out = np.empty(y.shape, dtype=float)
    zero = y == 0
    # P(Y = 0) = exp(-lambda)
    out[zero] = -(mu[zero] ** (2.0 - p[zero]) / (phi[zero] * (2.0 - p[zero])))

    pos = ~zero
    if pos.any():
        yp, mup, phip, pp = y[pos], mu[pos], phi[pos], p[pos]
        theta = mup ** (1.0 - pp) / (1.0 - pp)
        kappa = mup ** (2.0 - pp) / (2.0 - pp)
        log_w = _series_log_w(yp, phip, pp, drop, max_terms)
        out[pos] = log_w - np.log(yp) + (yp * theta - kappa) / phip
    return out


def _series_log_w(
    y: np.ndarray, phi: np.ndarray, p: np.ndarray, drop: float, max_terms: int
) -> np.ndarray:
    """
    log of sum_j W_j for y > 0, summed from the largest term outward.

    The window around j_max starts from the Gaussian-shaped width of the
    log-terms and doubles for any element whose edge terms are still within
    ``drop`` log-units of the peak.
    """
    alpha = (2.0 - p) / (p - 1.0)
    log_z = (
        alpha * np.log(y)
        - alpha * np.log(p - 1.0)
        - (1.0 + alpha) * np.log(phi)
        - np.log(2.0 - p)
    )
    j_max = np.maximum(y ** (2.0 - p) / ((2.0 - p) * phi), 1.0)
    centre = np.round(j_max)
    half = np.ceil(np.sqrt(2.0 * drop * j_max / (1.0 + alpha))) + 5.0

    result = np.empty(y.shape, dtype=float)
    pending = np.arange(y.size)
    while pending.size:
        width = int(half[pending].max())
        if 2 * width + 1 > max_terms:
            raise SeriesConvergenceError(
                f"Tweedie series needs more than {max_terms} terms"
            )
        offsets = np.arange(-width, width + 1, dtype=float)
        rows_per_chunk = max(1, _SERIES_CELLS // offsets.size)
        unresolved = []
        for start in range(0, pending.size, rows_per_chunk):
            idx = pending[start : start + rows_per_chunk]
            j = centre[idx, None] + offsets[None, :]
            valid = j >= 1.0
            j_safe = np.where(valid, j, 1.0)
            terms = (
                j_safe * log_z[idx, None]
                - gammaln(1.0 + j_safe)
                - gammaln(alpha[idx, None] * j_safe)
            )
            terms = np.where(valid, terms, -np.inf)
            peak = terms.max(axis=1)
            lower_open = valid[:, 0] & (terms[:, 0] > peak - drop)
            upper_open = terms[:, -1] > peak - drop
            converged = ~(lower_open | upper_open)
            result[idx[converged]] = logsumexp(terms[converged], axis=1)
            unresolved.append(idx[~converged])
        pending = np.concatenate(unresolved) if unresolved else np.empty(0, dtype=int)
        half[pending] = 2.0 * half[pending]
    return result


def sample(
    mu: ArrayLike,
    spec: TweedieSpec,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> np.ndarray:
    """
    Draw from Tweedie(mu, phi, p).

    For 1 < p < 2 this is N ~ Poisson(lambda) followed by a gamma with shape
    N * (2 - p) / (p - 1), which is the sum of N independent gamma claims.
    """
    mu = np.asarray(mu, dtype=float)
    if size is not None:
        mu = np.broadcast_to(mu, (size,) + mu.shape)
    return tweedie_sample(mu, spec.phi, spec.p, rng)


def tweedie_sample(
    mu: ArrayLike, phi: ArrayLike, p: ArrayLike, rng: np.random.Generator
) -> np.ndarray:
    """Elementwise Tweedie draws with per-element phi and p."""
    mu, phi, p = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, phi, p)))
    out = np.empty(mu.shape, dtype=float)

    gaussian = p == 0.0
    poisson = p == 1.0
    gamma = p == 2.0
    compound = (p > 1.0) & (p < 2.0)
    if not np.all(gaussian | poisson | gamma | compound):
        raise DomainError("unsupported Tweedie power; expected 0 or a value in [1, 2]")
    if np.any(~gaussian & ~(mu > 0)):
        raise DomainError("Tweedie mean must be positive when p > 0")

    if gaussian.any():
        out[gaussian] = rng.normal(mu[gaussian], np.sqrt(phi[gaussian]))
    if poisson.any():
        out[poisson] = phi[poisson] * rng.poisson(mu[poisson] / phi[poisson])
    if gamma.any():
        shape = 1.0 / phi[gamma]
        out[gamma] = rng.gamma(shape, mu[gamma] * phi[gamma])
    if compound.any():
        m, f, q = mu[compound], phi[compound], p[compound]
        rate = m ** (2.0 - q) / (f * (2.0 - q))
        claim_shape = (2.0 - q) / (q - 1.0)
        claim_scale = f * (q - 1.0) * m ** (q - 1.0)
        counts = rng.poisson(rate)
        draws = rng.gamma(np.maximum(counts * claim_shape, 1e-300), claim_scale)
        out[compound] = np.where(counts > 0, draws, 0.0)
    return out


def unit_deviance(y: ArrayLike, mu: ArrayLike, p: float) -> np.ndarray:
    """Tweedie unit deviance d(y, mu) for the supported powers."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if p == 0.0:
        return (y - mu) ** 2
    if p == 1.0:
        return 2.0 * (xlogy(y, y / mu) - (y - mu))
    if p == 2.0:
        return 2.0 * ((y - mu) / mu - np.log(y / mu))
    if not 1.0 < p < 2.0:
        raise DomainError("unsupported Tweedie power; expected 0 or a value in [1, 2]")
    return 2.0 * (
        np.maximum(y, 0.0) ** (2.0 - p) / ((1.0 - p) * (2.0 - p))
        - y * mu ** (1.0 - p) / (1.0 - p)
        + mu ** (2.0 - p) / (2.0 - p)
    )
