"""Static Tweedie GLM fitted by IRLS with a log link."""

from typing import List, Optional, Sequence, Tuple

import logfire
import numpy as np
import pandas as pd

from app.config import Config
from app.models.errors import ConvergenceError, SingularMatrixError
from app.models.params import TweedieSpec
from app.models.results import GlmFit
from app.models.triangle import TrianglePanel
from app.services import edf_service
from app.utils.parallel import map_items

# Configure logger
logger = logfire.with_settings(tags=[__name__])

STRUCTURES: Tuple[str, ...] = (
    "intercept",
    "hoerl",
    "hoerl_extended",
    "chain_ladder_crossclassified",
)


def design_for(
    structure: str, accident: np.ndarray, development: np.ndarray, dim: int
) -> Tuple[np.ndarray, List[str]]:
    """
    Design matrix of a mean structure for the given cells.

    ``hoerl`` has one level a_i per accident year with common r and s;
    ``hoerl_extended`` adds indicators for development years 1 and 2;
    ``chain_ladder_crossclassified`` has an intercept plus accident and
    development effects for years 2..I.

    Returns:
        Tuple[np.ndarray, List[str]]: Design matrix and coefficient names
    """
    accident = np.asarray(accident, dtype=int)
    j = np.asarray(development, dtype=float)

    if structure == "intercept":
        return np.ones((j.size, 1)), ["intercept"]

    if structure in ("hoerl", "hoerl_extended"):
        levels = (accident[:, None] == np.arange(1, dim + 1)[None, :]).astype(float)
        names = [f"a_{i}" for i in range(1, dim + 1)] + ["r", "s"]
        columns = [levels, np.log(j)[:, None], j[:, None]]
        if structure == "hoerl_extended":
            columns += [(j == 1).astype(float)[:, None], (j == 2).astype(float)[:, None]]
            names += ["b1", "b2"]
        return np.hstack(columns), names

    if structure == "chain_ladder_crossclassified":
        rows = (accident[:, None] == np.arange(2, dim + 1)[None, :]).astype(float)
        cols = (j.astype(int)[:, None] == np.arange(2, dim + 1)[None, :]).astype(float)
        names = (
            ["intercept"]
            + [f"row_{i}" for i in range(2, dim + 1)]
            + [f"dev_{k}" for k in range(2, dim + 1)]
        )
        return np.hstack([np.ones((j.size, 1)), rows, cols]), names

    raise ValueError(f"unknown mean structure {structure!r}; expected one of {STRUCTURES}")


def _deviance(y: np.ndarray, mu: np.ndarray, p: float) -> float:
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value = float(np.sum(edf_service.unit_deviance(y, mu, p)))
    return value if np.isfinite(value) else np.inf


def fit_irls(
    accident: np.ndarray,
    development: np.ndarray,
    y: np.ndarray,
    structure: str,
    p: float,
    dim: int,
    max_iter: Optional[int] = None,
    tol: float = 1e-11,
) -> GlmFit:
    """
    Fit a log-link Tweedie GLM with fixed power by iteratively reweighted least squares.

    Working weights are mu**(2 - p) and the working response is
    eta + (y - mu) / mu. A step that raises the deviance is halved.

    Args:
        accident: 1-based accident index per cell
        development: 1-based development index per cell
        y: Observed values
        structure: One of STRUCTURES
        p: Fixed Tweedie power
        dim: Triangle dimension I
        max_iter: Iteration budget, defaults to Config.GLM_MAX_ITER
        tol: Relative coefficient change treated as converged

    Returns:
        GlmFit: Coefficients, fitted means, residuals and Pearson dispersion

    Raises:
        SingularMatrixError: If the design is rank deficient for these cells
        ConvergenceError: If the budget runs out
    """
    TweedieSpec(p=p, phi=1.0)
    max_iter = max_iter or Config.GLM_MAX_ITER
    accident = np.asarray(accident, dtype=int)
    development = np.asarray(development, dtype=int)
    y = np.asarray(y, dtype=float)
    X, names = design_for(structure, accident, development, dim)
    n_obs, n_coef = X.shape

    if n_obs < n_coef or np.linalg.matrix_rank(X) < n_coef:
        raise SingularMatrixError(
            f"{structure} design is rank deficient: {n_obs} cells for {n_coef} coefficients"
        )

    positive = y[y > 0]
    guard = 0.1 * positive.mean() if positive.size else 1.0
    start = np.where(y > 0, y, guard)
    beta = np.linalg.lstsq(X, np.log(start), rcond=None)[0]
    deviance = _deviance(y, np.exp(X @ beta), p)

    with logfire.span("fit_irls", structure=structure, p=p, cells=n_obs):
        for iteration in range(1, max_iter + 1):
            eta = X @ beta
            mu = np.exp(eta)
            weights = mu ** (2.0 - p)
            working = eta + (y - mu) / mu
            weighted = X.T * weights
            try:
                proposal = np.linalg.solve(weighted @ X, weighted @ working)
            except np.linalg.LinAlgError as e:
                raise SingularMatrixError(f"singular information matrix in {structure} fit") from e

            new_deviance = _deviance(y, np.exp(X @ proposal), p)
            halvings = 0
            while new_deviance > deviance * (1.0 + 1e-12) + 1e-12 and halvings < 30:
                proposal = 0.5 * (beta + proposal)
                new_deviance = _deviance(y, np.exp(X @ proposal), p)
                halvings += 1
            if halvings:
                logger.warn("IRLS step halved", iteration=iteration, halvings=halvings)

            change = np.max(np.abs(proposal - beta))
            beta, deviance = proposal, new_deviance
            if change <= tol * (1.0 + np.max(np.abs(beta))):
                break
        else:
            raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")

    mu = np.exp(X @ beta)
    weights = mu ** (2.0 - p)
    score = X.T @ ((y - mu) * mu ** (1.0 - p))
    pearson = (y - mu) / np.sqrt(mu**p)
    dispersion = float(np.sum(pearson**2) / (n_obs - n_coef)) if n_obs > n_coef else np.nan
    covariance = dispersion * np.linalg.inv((X.T * weights) @ X)

    logger.debug(
        "IRLS converged",
        structure=structure,
        iterations=iteration,
        deviance=deviance,
        dispersion=dispersion,
    )
    return GlmFit(
        structure=structure,
        p=p,
        coefficient_names=names,
        coefficients=beta,
        covariance=covariance,
        accident=accident,
        development=development,
        observed=y,
        fitted_means=mu,
        pearson_residuals=pearson,
        dispersion_estimate=dispersion,
        deviance=deviance,
        score_norm=float(np.linalg.norm(score)),
        iterations=iteration,
        dim=dim,
    )


def fit_line(panel: TrianglePanel, line: int, structure: str, p: float) -> GlmFit:
    """Fit one line of a panel on its observed cells."""
    accident, development, y = panel.observed_cells(line)
    return fit_irls(accident, development, y, structure, p, panel.dim)


def fit_panel(panel: TrianglePanel, structure: str, p: Sequence[float]) -> List[GlmFit]:
    """Fit every line independently, in parallel; ``p`` gives one power per line."""
    return map_items(
        lambda n: fit_line(panel, n, structure, float(p[n])), list(range(panel.n_lines))
    )


def aggregate_residuals(
    keys: np.ndarray, observed: np.ndarray, fitted: np.ndarray, name: str
) -> pd.DataFrame:
    """
    Relative residual per key: (sum y - sum mu) / sum mu over the cells sharing the key.

    Raises:
        ValueError: If a key's fitted values sum to zero
    """
    frame = pd.DataFrame({name: keys, "observed": observed, "fitted": fitted})
    table = frame.groupby(name, as_index=False)[["observed", "fitted"]].sum()
    if np.any(table["fitted"] == 0):
        raise ValueError(f"zero fitted sum for some {name}")
    table["residual"] = (table["observed"] - table["fitted"]) / table["fitted"]
    return table


def pearson_residuals(fit: GlmFit) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Cell-wise Pearson residuals and the per-calendar-year aggregate residuals.

    Returns:
        Tuple[pd.DataFrame, pd.DataFrame]: Cells (i, j, t, observed, fitted, residual)
        and calendar years (t, observed, fitted, residual)
    """
    calendar = fit.accident + fit.development - 1
    cells = pd.DataFrame(
        {
            "i": fit.accident,
            "j": fit.development,
            "t": calendar,
            "observed": fit.observed,
            "fitted": fit.fitted_means,
            "residual": fit.pearson_residuals,
        }
    )
    return cells, aggregate_residuals(calendar, fit.observed, fit.fitted_means, "t")


def profile_power(
    accident: np.ndarray,
    development: np.ndarray,
    y: np.ndarray,
    structure: str,
    dim: int,
    grid: Sequence[float] = (1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9),
) -> Tuple[float, pd.DataFrame]:
    """
    Profile the Tweedie power by series log-likelihood at the Pearson dispersion.

    Returns:
        Tuple[float, pd.DataFrame]: The best power and the (p, dispersion, log_likelihood) table
    """
    rows = []
    for p in grid:
        fit = fit_irls(accident, development, y, structure, float(p), dim)
        loglik = float(
            np.sum(
                edf_service.tweedie_log_pdf(
                    fit.observed, fit.fitted_means, fit.dispersion_estimate, float(p)
                )
            )
        )
        rows.append(
            {"p": float(p), "dispersion": fit.dispersion_estimate, "log_likelihood": loglik}
        )
    table = pd.DataFrame(rows)
    best = float(table.loc[table["log_likelihood"].idxmax(), "p"])
    return best, table


def gamma_prior_from_fit(
    fit: GlmFit, h1_mean: float = 0.0, scale: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Prior moments of the first accident-year block from a Hoerl fit.

    The mean is (a_1 - h1_mean, r, s[, b1, b2]); the covariance is the IRLS
    covariance of those coefficients times ``scale``.
    """
    if fit.structure not in ("hoerl", "hoerl_extended"):
        raise ValueError("gamma prior needs a hoerl or hoerl_extended fit")
    scale = Config.GLM_PRIOR_SCALE if scale is None else scale
    names = ["a_1", "r", "s"] + (["b1", "b2"] if fit.structure == "hoerl_extended" else [])
    index = [fit.coefficient_names.index(name) for name in names]
    mean = fit.coefficients[index].copy()
    mean[0] -= h1_mean
    covariance = scale * fit.covariance[np.ix_(index, index)]
    if not np.all(np.isfinite(covariance)):
        raise ValueError("GLM covariance is not finite; too few cells for a dispersion estimate")
    return mean, covariance
