"""Symmetric factorisations with jitter escalation and PSD helpers."""

from typing import Tuple

import logfire
import numpy as np
from scipy import linalg
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from app.models.errors import SingularMatrixError

# Configure logger
logger = logfire.with_settings(tags=[__name__])

JITTER_LADDER: Tuple[float, ...] = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    """Average a square matrix with its transpose."""
    matrix = np.asarray(matrix, dtype=float)
    return 0.5 * (matrix + matrix.T)


def _log_escalation(retry_state) -> None:
    logger.warn(
        "Cholesky failed, escalating diagonal jitter",
        attempt=retry_state.attempt_number,
        next_jitter=JITTER_LADDER[min(retry_state.attempt_number, len(JITTER_LADDER) - 1)],
    )


def cholesky_jittered(matrix: np.ndarray) -> np.ndarray:
    """
    Lower Cholesky factor, adding relative diagonal jitter 1e-12 ... 1e-8 on failure.

    Args:
        matrix: Symmetric matrix expected to be positive definite

    Returns:
        np.ndarray: Lower-triangular factor L with L @ L.T = matrix (+ jitter)

    Raises:
        SingularMatrixError: If the matrix is not factorisable at the largest jitter
    """
    matrix = symmetrize(matrix)
    size = matrix.shape[0]
    if size == 0:
        return np.zeros((0, 0))
    if not np.all(np.isfinite(matrix)):
        raise SingularMatrixError("matrix has non-finite entries")

    diagonal = np.abs(np.diag(matrix))
    scale = float(diagonal.mean()) if diagonal.mean() > 0 else 1.0
    identity = np.eye(size)

    try:
        for attempt in Retrying(
            stop=stop_after_attempt(len(JITTER_LADDER)),
            retry=retry_if_exception_type(np.linalg.LinAlgError),
            after=_log_escalation,
            reraise=True,
        ):
            with attempt:
                jitter = JITTER_LADDER[attempt.retry_state.attempt_number - 1]
                return np.linalg.cholesky(matrix + jitter * scale * identity)
    except np.linalg.LinAlgError as e:
        raise SingularMatrixError(
            f"matrix of size {size} is singular after jitter {JITTER_LADDER[-1]}"
        ) from e
    raise SingularMatrixError("Cholesky retry loop ended without a result")


def solve_psd(matrix: np.ndarray, rhs: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Solve ``matrix @ x = rhs`` for a symmetric positive definite matrix.

    Returns:
        Tuple[np.ndarray, float]: The solution and log-determinant of ``matrix``
    """
    factor = cholesky_jittered(matrix)
    solution = linalg.cho_solve((factor, True), rhs)
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor))))
    return solution, log_det


def nearest_psd(matrix: np.ndarray) -> np.ndarray:
    """Project onto the PSD cone by flooring eigenvalues at zero."""
    values, vectors = np.linalg.eigh(symmetrize(matrix))
    return symmetrize((vectors * np.clip(values, 0.0, None)) @ vectors.T)


def psd_factor(matrix: np.ndarray) -> np.ndarray:
    """
    Square-root factor F with F @ F.T equal to the PSD projection of ``matrix``.

    Works for singular and zero matrices, which a Cholesky factor does not.
    """
    matrix = symmetrize(matrix)
    if matrix.size == 0:
        return matrix
    values, vectors = np.linalg.eigh(matrix)
    floor = -1e-10 * max(float(np.abs(values).max()), 1.0)
    if values.min() < floor:
        logger.warn(
            "Covariance not positive semidefinite, projecting",
            min_eigenvalue=float(values.min()),
        )
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def weighted_mean_cov(
    samples: np.ndarray, weights: np.ndarray, jitter: float = 1e-10
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted mean and covariance of the rows of ``samples``.

    Args:
        samples: (M, d) array
        weights: (M,) normalized nonnegative weights
        jitter: Diagonal term added to the covariance

    Returns:
        Tuple[np.ndarray, np.ndarray]: (d,) mean and (d, d) covariance
    """
    samples = np.asarray(samples, dtype=float)
    mean = weights @ samples
    centred = samples - mean
    cov = (centred * weights[:, None]).T @ centred
    cov = symmetrize(cov) + jitter * np.eye(samples.shape[1])
    return mean, cov
