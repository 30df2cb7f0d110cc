"""Matrices of the state-space representation, the linear predictor and factor evolutions."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.linalg import block_diag

from app.models.params import FactorState, ModelParams, gamma_factor_names


def _check_row(i: int, dim: int) -> None:
    if not 1 <= i <= dim:
        raise ValueError(f"accident index {i} outside 1..{dim}")


def design_matrix_A(i: int, dim: int, extended: bool = False) -> np.ndarray:
    """
    Hoerl design rows of accident year ``i``.

    Row j (1-based) is [1, log j, j] or, extended, [1, log j, j, 1{j=1}, 1{j=2}].

    Returns:
        np.ndarray: (I - i + 1, k) matrix
    """
    _check_row(i, dim)
    j = np.arange(1, dim - i + 2, dtype=float)
    columns = [np.ones_like(j), np.log(j), j]
    if extended:
        columns += [(j == 1).astype(float), (j == 2).astype(float)]
    return np.column_stack(columns)


def selector_matrix_E(i: int, dim: int) -> np.ndarray:
    """(I - i + 1, I) matrix whose row j selects h_{i + j - 1}."""
    _check_row(i, dim)
    return np.eye(dim)[i - 1 :, :]


def linear_predictor(state: FactorState, i: int, line: int) -> np.ndarray:
    """
    Log-means of row ``i`` for one line.

    Entry j is a + r log j + s j [+ b1 1{j=1} + b2 1{j=2}] + h_{i+j-1}.
    """
    dim = state.dim
    _check_row(i, dim)
    gamma = state.gamma[line]
    j = np.arange(1, dim - i + 2, dtype=float)
    eta = gamma[0] + gamma[1] * np.log(j) + gamma[2] * j
    if state.extended:
        eta = eta + gamma[3] * (j == 1) + gamma[4] * (j == 2)
    return eta + state.psi[line, i - 1 :]


def row_predictor(
    gamma: np.ndarray, psi: np.ndarray, i: int, design: np.ndarray
) -> np.ndarray:
    """
    Vectorized predictor of row ``i`` for many particles.

    Args:
        gamma: (..., N, k) accident-year blocks
        psi: (..., N, I) calendar factors
        i: Accident index (1-based)
        design: (J_i, k) output of :func:`design_matrix_A`

    Returns:
        np.ndarray: (..., N, J_i) linear predictors
    """
    return gamma @ design.T + psi[..., i - 1 : i - 1 + design.shape[0]]


def evolve_gamma(
    prev: np.ndarray, variances: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Random-walk step of accident-year blocks: each component gets N(0, its variance)."""
    prev = np.asarray(prev, dtype=float)
    variances = np.broadcast_to(np.asarray(variances, dtype=float), prev.shape)
    return prev + rng.standard_normal(prev.shape) * np.sqrt(variances)


def evolve_calendar_arrays(
    prev_h: np.ndarray,
    sigma2_h: np.ndarray,
    lam: np.ndarray,
    sigma2_h_tilde: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    h_t = h_{t-1} + eps_t + lambda * eps~_t over a leading batch dimension.

    Args:
        prev_h: (..., N) calendar factors at t - 1
        sigma2_h: (..., N) line-specific variances
        lam: (..., N) common-shock loadings
        sigma2_h_tilde: (...) common-shock variance, one shock shared by all lines
        rng: Random stream

    Returns:
        Tuple[np.ndarray, np.ndarray]: h_t with shape (..., N) and the shocks with shape (...)
    """
    prev_h = np.asarray(prev_h, dtype=float)
    batch = prev_h.shape[:-1]
    own = rng.standard_normal(prev_h.shape) * np.sqrt(np.broadcast_to(sigma2_h, prev_h.shape))
    common = np.asarray(
        rng.standard_normal(batch) * np.sqrt(np.broadcast_to(sigma2_h_tilde, batch))
    )
    return prev_h + own + np.asarray(lam) * common[..., None], common


def evolve_calendar(
    prev_h: np.ndarray, params: ModelParams, rng: np.random.Generator
) -> Tuple[np.ndarray, float]:
    """One calendar step for all lines with a single shared common shock."""
    h_t, common = evolve_calendar_arrays(
        np.asarray(prev_h, dtype=float),
        params.line_array("sigma2_h"),
        params.line_array("lam"),
        np.asarray(params.sigma2_h_tilde),
        rng,
    )
    return h_t, float(common)


def simulate_calendar(
    h1: np.ndarray,
    sigma2_h: np.ndarray,
    lam: np.ndarray,
    sigma2_h_tilde: np.ndarray,
    dim: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Calendar paths h_1 ... h_dim from their starting values.

    Returns:
        np.ndarray: (..., N, dim) paths for a (..., N) batch of starting values
    """
    h1 = np.asarray(h1, dtype=float)
    paths = np.empty(h1.shape + (dim,))
    paths[..., 0] = h1
    for t in range(1, dim):
        paths[..., t], _ = evolve_calendar_arrays(
            paths[..., t - 1], sigma2_h, lam, sigma2_h_tilde, rng
        )
    return paths


def psi_moments_exact(
    params: ModelParams, dim: int, h1_mean: np.ndarray, h1_var: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mean and covariance of the stacked calendar block (line-major, h_1..h_I per line).

    Same line: Cov(h_s, h_t) = Var(h_1) + (min(s, t) - 1)(sigma2_h + lambda^2 sigma2_h~).
    Across lines: (min(s, t) - 1) lambda^(1) lambda^(2) sigma2_h~; h_1 is independent across lines.
    """
    n_lines = params.n_lines
    lam = params.line_array("lam")
    sigma2_h = params.line_array("sigma2_h")
    t = np.arange(1, dim + 1)
    steps = np.minimum.outer(t, t) - 1.0

    mean = np.repeat(np.asarray(h1_mean, dtype=float), dim)
    cov = np.zeros((n_lines * dim, n_lines * dim))
    for n in range(n_lines):
        for m in range(n_lines):
            block = steps * lam[n] * lam[m] * params.sigma2_h_tilde
            if n == m:
                block = block + steps * sigma2_h[n] + float(h1_var[n])
            cov[n * dim : (n + 1) * dim, m * dim : (m + 1) * dim] = block
    return mean, cov


@dataclass(frozen=True)
class GaussianSystem:
    """Stacked matrices for accident year i (lines block-diagonal, line-major ordering)."""

    A: np.ndarray
    E: np.ndarray
    H: np.ndarray
    Q_gamma: np.ndarray
    Q_h: np.ndarray
    R: np.ndarray
    S: np.ndarray
    Lambda: np.ndarray


def build_gaussian_system(
    i: int, dim: int, params: ModelParams, extended: bool = False
) -> GaussianSystem:
    """
    Assemble the stacked system for accident year ``i``.

    ``R`` maps the per-line calendar vectors (h_1..h_{t-1}) to (h_1..h_t) by
    appending a copy of h_{t-1}; ``S`` maps (eps^(1..N), eps~) onto the new
    entries with the loadings of ``Lambda`` in its last column. Here t = i.
    """
    n_lines = params.n_lines
    k = len(gamma_factor_names(extended))
    A = block_diag(*[design_matrix_A(i, dim, extended) for _ in range(n_lines)])
    E = block_diag(*[selector_matrix_E(i, dim) for _ in range(n_lines)])
    rows = dim - i + 1
    H = np.diag(np.repeat(params.line_array("phi"), rows))
    Q_gamma = np.diag(params.gamma_variances(extended).reshape(n_lines * k))
    Q_h = np.diag(np.append(params.line_array("sigma2_h"), params.sigma2_h_tilde))

    t = i
    previous = t - 1
    R_line = np.vstack([np.eye(previous), np.eye(previous)[-1:]]) if previous else np.zeros((1, 0))
    R = block_diag(*[R_line for _ in range(n_lines)])
    lam = params.line_array("lam")
    S = np.zeros((n_lines * t, n_lines + 1))
    if previous:
        for n in range(n_lines):
            S[n * t + t - 1, n] = 1.0
            S[n * t + t - 1, n_lines] = lam[n]
    Lambda = np.column_stack([np.eye(n_lines), lam])
    return GaussianSystem(A=A, E=E, H=H, Q_gamma=Q_gamma, Q_h=Q_h, R=R, S=S, Lambda=Lambda)
