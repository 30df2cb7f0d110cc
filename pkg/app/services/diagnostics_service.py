"""Fitting ratios, tracking, residual and dependence diagnostics."""

from typing import Dict, List, Optional, Sequence, Tuple

import logfire
import numpy as np
import pandas as pd
from scipy import stats

from app.models.params import ModelParams, gamma_factor_names
from app.models.results import (
    AssociationResult,
    DiagnosticReport,
    KalmanRun,
    StepSummary,
    TruthRecord,
)
from app.models.triangle import TrianglePanel, upper_triangle_mask
from app.services.glm_service import aggregate_residuals

# Configure logger
logger = logfire.with_settings(tags=[__name__])


def hoerl_summary(r: float, s: float) -> Tuple[float, float]:
    """
    Mean (r - 1) / (-s) and variance (r - 1) / s^2 of a Hoerl development curve.

    Raises:
        ValueError: If s is zero
    """
    if s == 0:
        raise ValueError("Hoerl summaries need s != 0")
    if s > 0:
        logger.warn("Hoerl curve with s > 0 has no finite development summary", r=r, s=s)
    return (r - 1.0) / (-s), (r - 1.0) / s**2


def _hoerl_or_nan(r: float, s: float) -> Tuple[float, float]:
    return hoerl_summary(r, s) if s != 0 else (np.nan, np.nan)


def factors_from_history(history: Sequence[StepSummary]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Filtered accident-year blocks by row and the final calendar factors of a particle run.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (N, I, k) block means at their own step and (N, I) h means
    """
    gamma = np.stack([summary.gamma_mean for summary in history], axis=1)
    return gamma, history[-1].psi_mean


def factors_from_kalman(run: KalmanRun, n_lines: int) -> Tuple[np.ndarray, np.ndarray]:
    """Kalman counterpart of :func:`factors_from_history`."""
    gamma = np.stack([step.gamma_mean.reshape(n_lines, -1) for step in run.steps], axis=1)
    return gamma, run.final_state.psi_mean.reshape(n_lines, -1)


def hoerl_table(gamma: np.ndarray, line_names: Sequence[str]) -> pd.DataFrame:
    """Hoerl mean and variance per (line, accident year); NaN where s = 0."""
    rows = []
    for n, name in enumerate(line_names):
        for i in range(gamma.shape[1]):
            r, s = float(gamma[n, i, 1]), float(gamma[n, i, 2])
            mean, variance = _hoerl_or_nan(r, s)
            rows.append(
                {"line": name, "i": i + 1, "r": r, "s": s, "mean": mean, "variance": variance}
            )
    return pd.DataFrame(rows)


def fitting_ratios(
    gamma: np.ndarray, psi: np.ndarray, truth: TruthRecord, line_names: Sequence[str]
) -> pd.DataFrame:
    """
    Filtered over true value for every factor, plus the Hoerl mean and variance.

    Ratios against a zero truth are left NaN.

    Returns:
        pd.DataFrame: Columns line, factor, index, filtered, true, ratio
    """
    names = gamma_factor_names(truth.extended)
    rows = []

    def add(line: str, factor: str, index: int, filtered: float, true: float) -> None:
        ratio = filtered / true if true != 0 else np.nan
        rows.append(
            {
                "line": line,
                "factor": factor,
                "index": index,
                "filtered": filtered,
                "true": true,
                "ratio": ratio,
            }
        )

    dim = gamma.shape[1]
    for n, line in enumerate(line_names):
        for i in range(dim):
            for k, factor in enumerate(names):
                add(line, factor, i + 1, float(gamma[n, i, k]), float(truth.gamma[n, i, k]))
            fitted = _hoerl_or_nan(float(gamma[n, i, 1]), float(gamma[n, i, 2]))
            true = _hoerl_or_nan(float(truth.gamma[n, i, 1]), float(truth.gamma[n, i, 2]))
            add(line, "hoerl_mean", i + 1, fitted[0], true[0])
            add(line, "hoerl_variance", i + 1, fitted[1], true[1])
        for t in range(psi.shape[1]):
            add(line, "h", t + 1, float(psi[n, t]), float(truth.psi[n, t]))
    return pd.DataFrame(rows)


def residuals_by_dimension(
    panel: TrianglePanel, fitted: np.ndarray
) -> Dict[str, pd.DataFrame]:
    """
    Relative residuals (sum y - sum mu) / sum mu by accident, development and calendar year.

    Args:
        panel: Observed panel
        fitted: (N, I, I) fitted means, used on observed cells only

    Returns:
        Dict[str, pd.DataFrame]: Tables keyed ``accident``, ``development`` and ``calendar``
    """
    tables: Dict[str, List[pd.DataFrame]] = {"accident": [], "development": [], "calendar": []}
    for n, name in enumerate(panel.line_names):
        rows, cols = np.nonzero(panel.mask[n])
        observed = panel.values[n, rows, cols]
        means = fitted[n, rows, cols]
        keys = {"accident": rows + 1, "development": cols + 1, "calendar": rows + cols + 1}
        for dimension, index in keys.items():
            table = aggregate_residuals(index, observed, means, "year")
            table.insert(0, "line", name)
            tables[dimension].append(table)
    return {key: pd.concat(frames, ignore_index=True) for key, frames in tables.items()}


def association(x: np.ndarray, y: np.ndarray) -> AssociationResult:
    """
    Pearson, Spearman and Kendall coefficients with two-sided p-values.

    Pearson and Spearman p-values use the t approximation, Kendall's the
    normal approximation.

    Raises:
        ValueError: On fewer than 3 pairs or a constant input
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("association needs two paired one-dimensional samples")
    if x.size < 3:
        raise ValueError("association needs at least 3 pairs")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("association of a constant sample is undefined")
    pearson = stats.pearsonr(x, y)
    spearman = stats.spearmanr(x, y)
    kendall = stats.kendalltau(x, y, method="asymptotic")
    return AssociationResult(
        n=int(x.size),
        pearson=float(pearson[0]),
        pearson_p=float(pearson[1]),
        spearman=float(spearman[0]),
        spearman_p=float(spearman[1]),
        kendall=float(kendall[0]),
        kendall_p=float(kendall[1]),
    )


def paired_cell_residuals(
    cells_1: pd.DataFrame, cells_2: pd.DataFrame
) -> Tuple[np.ndarray, np.ndarray]:
    """Residuals of the cells observed in both lines, matched on (i, j)."""
    merged = cells_1.merge(cells_2, on=["i", "j"], suffixes=("_1", "_2"))
    return merged["residual_1"].to_numpy(), merged["residual_2"].to_numpy()


def calendar_residual_correlation(
    calendar_1: pd.DataFrame, calendar_2: pd.DataFrame, omit_first: bool = False
) -> AssociationResult:
    """
    Association of two lines' calendar-year residuals over every calendar year.

    With ``omit_first`` the single-cell first calendar year is left out.
    """
    key = "t" if "t" in calendar_1.columns else "year"
    merged = calendar_1.merge(calendar_2, on=key, suffixes=("_1", "_2"))
    if omit_first:
        merged = merged[merged[key] > 1]
    return association(merged["residual_1"].to_numpy(), merged["residual_2"].to_numpy())


def calendar_associations(
    calendar_1: pd.DataFrame, calendar_2: pd.DataFrame
) -> Tuple[AssociationResult, Optional[AssociationResult]]:
    """
    Calendar residual association over all years, and without the first year.

    Raises:
        ValueError: When the all-years association is undefined
    """
    full = calendar_residual_correlation(calendar_1, calendar_2)
    try:
        reduced = calendar_residual_correlation(calendar_1, calendar_2, omit_first=True)
    except ValueError as e:
        logger.warn("No calendar association without the first year", reason=str(e))
        reduced = None
    return full, reduced


def calendar_association_table(
    full: AssociationResult, omit_first: Optional[AssociationResult] = None
) -> pd.DataFrame:
    """Association rows labelled ``all`` first, then ``omit_first`` when available."""
    frames = [full.to_frame().assign(calendar_years="all")]
    if omit_first is not None:
        frames.append(omit_first.to_frame().assign(calendar_years="omit_first"))
    return pd.concat(frames, ignore_index=True)


def tracking_table(
    panel: TrianglePanel,
    fitted_current: Sequence[np.ndarray],
    fitted_previous: Sequence[Optional[np.ndarray]],
) -> pd.DataFrame:
    """
    Observed against filtered and one-step-ahead development patterns per accident year.

    Args:
        panel: Observed panel
        fitted_current: Per row i, (N, J_i) fit after filtering row i
        fitted_previous: Per row i, (N, J_i) prediction before seeing row i, or None

    Returns:
        pd.DataFrame: Columns line, i, j, observed, fitted_current, fitted_previous
    """
    rows = []
    for i, (current, previous) in enumerate(zip(fitted_current, fitted_previous), start=1):
        width = panel.dim - i + 1
        for n, name in enumerate(panel.line_names):
            for j in range(1, width + 1):
                observed = panel.values[n, i - 1, j - 1] if panel.mask[n, i - 1, j - 1] else np.nan
                rows.append(
                    {
                        "line": name,
                        "i": i,
                        "j": j,
                        "observed": observed,
                        "fitted_current": float(current[n, j - 1]),
                        "fitted_previous": (
                            float(previous[n, j - 1]) if previous is not None else np.nan
                        ),
                    }
                )
    return pd.DataFrame(rows)


def tracking_rmse(tracking: pd.DataFrame) -> pd.DataFrame:
    """Per (line, i) RMSE of the current and previous fits against the observed row."""
    frame = tracking.dropna(subset=["observed"])
    squared = pd.DataFrame(
        {
            "line": frame["line"],
            "i": frame["i"],
            "rmse_current": (frame["observed"] - frame["fitted_current"]) ** 2,
            "rmse_previous": (frame["observed"] - frame["fitted_previous"]) ** 2,
        }
    )
    table = squared.groupby(["line", "i"], as_index=False).mean()
    table[["rmse_current", "rmse_previous"]] = np.sqrt(table[["rmse_current", "rmse_previous"]])
    return table


def fitted_grid(fitted_current: Sequence[np.ndarray], dim: int) -> np.ndarray:
    """(N, I, I) grid of filtered row fits, NaN below the diagonal."""
    n_lines = fitted_current[0].shape[0]
    grid = np.full((n_lines, dim, dim), np.nan)
    for i, row in enumerate(fitted_current):
        grid[:, i, : row.shape[1]] = row
    return grid


def heatmap_table(panel: TrianglePanel, fitted: np.ndarray) -> pd.DataFrame:
    """Observed over fitted ratio for every upper-triangle cell, NaN where unobserved."""
    upper = upper_triangle_mask(panel.dim)
    rows = []
    for n, name in enumerate(panel.line_names):
        for i, j in zip(*np.nonzero(upper)):
            observed = panel.mask[n, i, j]
            denominator = fitted[n, i, j]
            ratio = (
                panel.values[n, i, j] / denominator
                if observed and np.isfinite(denominator) and denominator != 0
                else np.nan
            )
            rows.append({"line": name, "i": i + 1, "j": j + 1, "ratio": ratio})
    return pd.DataFrame(rows)


def calendar_correlation(
    h_1: np.ndarray, h_2: np.ndarray, level: float = 0.95, skip_first: bool = False
) -> Dict[str, float]:
    """
    Pearson correlation of two calendar factor series with a Fisher-z interval.

    Returns:
        Dict[str, float]: n, correlation, ci_low and ci_high
    """
    h_1 = np.asarray(h_1, dtype=float)
    h_2 = np.asarray(h_2, dtype=float)
    if skip_first:
        h_1, h_2 = h_1[1:], h_2[1:]
    size = h_1.size
    if size < 4:
        raise ValueError("calendar correlation needs at least 4 calendar years")
    r = float(stats.pearsonr(h_1, h_2)[0])
    z = np.arctanh(np.clip(r, -1 + 1e-15, 1 - 1e-15))
    half = stats.norm.ppf(0.5 + level / 2) / np.sqrt(size - 3)
    return {
        "n": float(size),
        "correlation": r,
        "ci_low": float(np.tanh(z - half)),
        "ci_high": float(np.tanh(z + half)),
    }


def theoretical_increment_correlation(
    params: ModelParams, line_1: int = 0, line_2: int = 1
) -> float:
    """
    Correlation of two lines' calendar increments under the common-shock evolution.

    lambda_1 lambda_2 s~ / sqrt((s_1 + lambda_1^2 s~)(s_2 + lambda_2^2 s~)), with s~
    the common-shock variance and s_n the line-specific ones.
    """
    first, second = params.lines[line_1], params.lines[line_2]
    shared = params.sigma2_h_tilde
    covariance = first.lam * second.lam * shared
    scale = np.sqrt(
        (first.sigma2_h + first.lam**2 * shared) * (second.sigma2_h + second.lam**2 * shared)
    )
    if scale == 0:
        raise ValueError("calendar increments have zero variance")
    return float(covariance / scale)


def development_peaks(panel: TrianglePanel, top: int = 2) -> pd.DataFrame:
    """Development years with the largest observed values for every accident year."""
    rows = []
    for n, name in enumerate(panel.line_names):
        for i in range(1, panel.dim + 1):
            values = panel.row(n, i)
            observed = np.flatnonzero(panel.row_mask(n, i))
            ranked = observed[np.argsort(-values[observed], kind="stable")][:top]
            for rank, j in enumerate(ranked, start=1):
                rows.append(
                    {"line": name, "i": i, "rank": rank, "j": int(j) + 1, "value": float(values[j])}
                )
    return pd.DataFrame(rows)


def build_report(
    panel: TrianglePanel,
    gamma: np.ndarray,
    psi: np.ndarray,
    fitted_current: Sequence[np.ndarray],
    fitted_previous: Sequence[Optional[np.ndarray]],
    truth: Optional[TruthRecord] = None,
) -> DiagnosticReport:
    """Assemble every diagnostic table of one fitted panel."""
    with logfire.span("build_report", lines=panel.n_lines, dim=panel.dim):
        fitted = fitted_grid(fitted_current, panel.dim)
        residual_tables = residuals_by_dimension(panel, fitted)

        association_result = None
        association_reduced = None
        correlation = None
        if panel.n_lines >= 2:
            calendar = residual_tables["calendar"]
            names = panel.line_names
            first = calendar[calendar["line"] == names[0]].drop(columns="line")
            second = calendar[calendar["line"] == names[1]].drop(columns="line")
            try:
                association_result, association_reduced = calendar_associations(first, second)
            except ValueError as e:
                logger.warn("Skipping calendar residual association", reason=str(e))
            try:
                anchored = bool(np.ptp(psi[:, 0]) == 0)
                correlation = calendar_correlation(psi[0], psi[1], skip_first=anchored)
            except ValueError as e:
                logger.warn("Skipping calendar factor correlation", reason=str(e))

        return DiagnosticReport(
            hoerl_summaries=hoerl_table(gamma, panel.line_names),
            residual_tables=residual_tables,
            heatmap=heatmap_table(panel, fitted),
            tracking=tracking_table(panel, fitted_current, fitted_previous),
            fitting_ratios=(
                fitting_ratios(gamma, psi, truth, panel.line_names) if truth is not None else None
            ),
            association=association_result,
            association_omit_first=association_reduced,
            calendar_correlation=correlation,
        )
