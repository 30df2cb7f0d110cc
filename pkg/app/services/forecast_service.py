"""Lower-triangle forecasts, reserve statistics and risk margins."""

import math
from typing import Dict, List, Optional, Sequence

import logfire
import numpy as np
import pandas as pd
from scipy.stats import gaussian_kde

from app.config import Config
from app.models.params import ModelParams, ObservationFamily
from app.models.results import KalmanRun, ParticleCloud, ReserveDistribution, ReserveSummary
from app.models.triangle import PanelScale, PanelTransform, TrianglePanel, upper_triangle_mask
from app.services import edf_service, state_space_service
from app.services.particle_filter_service import normalize
from app.utils.linalg import psd_factor
from app.utils.parallel import map_blocks
from app.utils.rng import stream

# Configure logger
logger = logfire.with_settings(tags=[__name__])

AGGREGATE = "aggregate"


def _calendar_paths(
    psi: np.ndarray,
    sigma2_h: np.ndarray,
    lam: np.ndarray,
    sigma2_h_tilde: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Extend (S, N, I) calendar factors to (S, N, 2I - 1) with fresh shocks."""
    dim = psi.shape[2]
    paths = np.empty(psi.shape[:2] + (2 * dim - 1,))
    paths[..., :dim] = psi
    for t in range(dim, 2 * dim - 1):
        paths[..., t], _ = state_space_service.evolve_calendar_arrays(
            paths[..., t - 1], sigma2_h, lam, sigma2_h_tilde, rng
        )
    return paths


def _outstanding_by_row(
    gamma_rows: np.ndarray,
    psi: np.ndarray,
    sigma2_h: np.ndarray,
    lam: np.ndarray,
    sigma2_h_tilde: np.ndarray,
    phi: np.ndarray,
    power: np.ndarray,
    family: ObservationFamily,
    panel: TrianglePanel,
    extended: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Draw every lower-triangle cell and sum by accident year.

    Args:
        gamma_rows: (S, N, I, k) accident-year blocks of each row
        psi: (S, N, I) calendar factors up to I
        sigma2_h, lam, phi, power: (S, N) parameters
        sigma2_h_tilde: (S,) common-shock variances

    Returns:
        np.ndarray: (S, N, I) outstanding claims by line and accident year
    """
    dim = panel.dim
    paths = _calendar_paths(psi, sigma2_h, lam, sigma2_h_tilde, rng)
    design = state_space_service.design_matrix_A(1, dim, extended)
    lower = ~upper_triangle_mask(dim)
    rows, cols = np.nonzero(lower)

    eta = np.einsum("snik,jk->snij", gamma_rows, design)[:, :, rows, cols]
    eta = eta + paths[:, :, rows + cols]
    if family == ObservationFamily.TWEEDIE:
        with np.errstate(over="ignore"):
            means = np.exp(eta)
    else:
        means = eta
    cells = edf_service.tweedie_sample(
        means, phi[:, :, None], power[:, :, None], rng
    )
    if panel.transform == PanelTransform.LOG:
        cells = np.exp(cells)
    if panel.scale == PanelScale.LOSS_RATIO:
        cells = cells * panel.exposures[:, rows][None]

    by_row = np.zeros(cells.shape[:2] + (dim,))
    np.add.at(by_row, (slice(None), slice(None), rows), cells)
    return by_row


def forecast_particles(
    cloud: ParticleCloud,
    panel: TrianglePanel,
    draws: Optional[int] = None,
    seed: Optional[int] = None,
    block_size: Optional[int] = None,
    workers: Optional[int] = None,
) -> ReserveDistribution:
    """
    Posterior predictive outstanding claims from the final particle cloud.

    Each draw picks a particle by its final weight, takes that particle's
    accident-year path and calendar factors, simulates h_{I+1} ... h_{2I-1}
    with fresh common shocks and draws every lower-triangle cell from the
    observation family. Loss-ratio panels are rescaled by exposure.

    Args:
        cloud: Final cloud of a full run
        panel: The panel the cloud was fitted on
        draws: Number of joint draws S
        seed: Forecast seed, independent of the filter seed
        block_size: Draws per random-stream block
        workers: Thread count

    Returns:
        ReserveDistribution: (S, N, I) draws
    """
    draws = Config.DEFAULT_DRAWS if draws is None else draws
    seed = Config.DEFAULT_SEED if seed is None else seed
    if draws < 1:
        raise ValueError("at least one forecast draw is required")
    if cloud.step != panel.dim:
        raise ValueError(f"cloud stopped at accident year {cloud.step}, panel has {panel.dim}")

    weights = normalize(cloud.log_weights)
    names = cloud.parameter_names
    n_lines = panel.n_lines
    family = ObservationFamily(cloud.family)

    def line_columns(field: str) -> List[int]:
        return [names.index(f"{field}[{n}]") for n in range(1, n_lines + 1)]

    def block_draws(block: int, part: slice) -> np.ndarray:
        rng = stream(seed, "forecast-particles", block)
        picks = rng.choice(cloud.size, size=part.stop - part.start, p=weights)
        natural = cloud.natural[picks]
        power = (
            natural[:, line_columns("p")]
            if family == ObservationFamily.TWEEDIE
            else np.zeros((picks.size, n_lines))
        )
        return _outstanding_by_row(
            np.swapaxes(cloud.gamma_path[picks], 1, 2),
            cloud.psi[picks],
            natural[:, line_columns("sigma2_h")],
            natural[:, line_columns("lam")],
            natural[:, names.index("sigma2_h_tilde")],
            natural[:, line_columns("phi")],
            power,
            family,
            panel,
            cloud.extended,
            rng,
        )

    with logfire.span("forecast_particles", draws=draws, particles=cloud.size):
        samples = np.concatenate(map_blocks(block_draws, draws, block_size, workers))
        mean_total = float(samples.sum(axis=(1, 2)).mean())
        logger.info("Forecast complete", draws=draws, mean_total=mean_total)
        return ReserveDistribution(
            by_accident_year=samples,
            line_names=list(panel.line_names),
            provenance={
                "source": "particle",
                "draws": draws,
                "seed": seed,
                "particles": cloud.size,
            },
        )


def forecast_kalman(
    run: KalmanRun,
    params: ModelParams,
    panel: TrianglePanel,
    draws: Optional[int] = None,
    seed: Optional[int] = None,
    block_size: Optional[int] = None,
    workers: Optional[int] = None,
) -> ReserveDistribution:
    """
    Predictive outstanding claims from a Kalman run with fixed parameters.

    The calendar block is drawn jointly from its final posterior and each
    row's accident-year block from that row's filtered posterior.
    """
    draws = Config.DEFAULT_DRAWS if draws is None else draws
    seed = Config.DEFAULT_SEED if seed is None else seed
    if draws < 1:
        raise ValueError("at least one forecast draw is required")
    if len(run.steps) != panel.dim:
        raise ValueError("Kalman run does not cover every accident year of the panel")

    n_lines = panel.n_lines
    dim = panel.dim
    final = run.final_state
    psi_factor = psd_factor(final.psi_cov)
    gamma_means = np.stack([step.gamma_mean for step in run.steps])
    gamma_factors = np.stack([psd_factor(step.gamma_cov) for step in run.steps])
    k = gamma_means.shape[1] // n_lines

    def block_draws(block: int, part: slice) -> np.ndarray:
        rng = stream(seed, "forecast-kalman", block)
        count = part.stop - part.start
        psi = final.psi_mean + rng.standard_normal((count, final.psi_mean.size)) @ psi_factor.T
        noise = rng.standard_normal((count, dim, gamma_means.shape[1]))
        gamma = gamma_means[None] + np.einsum("iab,sib->sia", gamma_factors, noise)
        gamma_rows = gamma.reshape(count, dim, n_lines, k).swapaxes(1, 2)

        def tile(values: np.ndarray) -> np.ndarray:
            return np.broadcast_to(values, (count,) + values.shape).copy()

        return _outstanding_by_row(
            gamma_rows,
            psi.reshape(count, n_lines, dim),
            tile(params.line_array("sigma2_h")),
            tile(params.line_array("lam")),
            np.full(count, params.sigma2_h_tilde),
            tile(params.line_array("phi")),
            np.zeros((count, n_lines)),
            ObservationFamily.GAUSSIAN,
            panel,
            run.extended,
            rng,
        )

    with logfire.span("forecast_kalman", draws=draws):
        samples = np.concatenate(map_blocks(block_draws, draws, block_size, workers))
        return ReserveDistribution(
            by_accident_year=samples,
            line_names=list(panel.line_names),
            provenance={"source": "kalman", "draws": draws, "seed": seed},
        )


def var_quantile(samples: np.ndarray, chi: float) -> float:
    """
    Empirical VaR: the order statistic at 1-based index ceil(chi * S).

    Raises:
        ValueError: On empty samples or chi outside (0, 1)
    """
    samples = np.asarray(samples, dtype=float).reshape(-1)
    if not samples.size:
        raise ValueError("VaR of an empty sample")
    if not 0.0 < chi < 1.0:
        raise ValueError("VaR level must lie in (0, 1)")
    index = max(math.ceil(round(chi * samples.size, 9)) - 1, 0)
    return float(np.sort(samples)[index])


def _sd(samples: np.ndarray) -> float:
    return float(np.std(samples, ddof=1)) if samples.size > 1 else 0.0


def risk_margin_from_stats(mean: float, sd: float, var: float) -> float:
    """max(VaR - mean, SD / 2)."""
    return max(var - mean, 0.5 * sd)


def risk_margin(samples: np.ndarray, chi: float) -> float:
    """Risk margin max(VaR_chi - mean, SD / 2) of a sample."""
    samples = np.asarray(samples, dtype=float).reshape(-1)
    return risk_margin_from_stats(float(samples.mean()), _sd(samples), var_quantile(samples, chi))


def diversification_benefit(line_margins: Sequence[float], aggregate_margin: float) -> float:
    """
    Percentage reduction of the aggregate margin against the sum of line margins.

    Raises:
        ValueError: If the line margins sum to zero
    """
    total = float(np.sum(line_margins))
    if total == 0:
        raise ValueError("diversification benefit of zero line margins")
    return (total - aggregate_margin) / total * 100.0


def _columns(dist: ReserveDistribution) -> Dict[str, np.ndarray]:
    totals = dist.line_totals
    columns = {name: totals[:, n] for n, name in enumerate(dist.line_names)}
    columns[AGGREGATE] = dist.aggregate
    return columns


def density_table(samples: np.ndarray, points: int = 512) -> pd.DataFrame:
    """Gaussian kernel density with Silverman's bandwidth on an even grid; empty when SD is 0."""
    samples = np.asarray(samples, dtype=float).reshape(-1)
    if samples.size < 2 or _sd(samples) == 0:
        return pd.DataFrame({"x": [], "density": []})
    kde = gaussian_kde(samples, bw_method="silverman")
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(samples.min() - 4 * bandwidth, samples.max() + 4 * bandwidth, points)
    return pd.DataFrame({"x": grid, "density": kde(grid)})


def summarize(
    dist: ReserveDistribution, levels: Sequence[float] = (0.75, 0.95), points: int = 512
) -> ReserveSummary:
    """
    Summary tables of a reserve distribution.

    Returns:
        ReserveSummary: Mean/SD/VaR per line and aggregate, per-accident-year
        moments, risk margins with diversification benefit, and densities
    """
    columns = _columns(dist)
    summary_rows = []
    margin_rows = []
    density_frames = []
    for name, samples in columns.items():
        row = {"line": name, "mean": float(samples.mean()), "sd": _sd(samples)}
        for level in levels:
            row[f"var_{level:g}"] = var_quantile(samples, level)
        summary_rows.append(row)
        density = density_table(samples, points)
        density.insert(0, "line", name)
        density_frames.append(density)

    for level in levels:
        margins = {name: risk_margin(samples, level) for name, samples in columns.items()}
        line_margins = [margins[name] for name in dist.line_names]
        benefit = (
            diversification_benefit(line_margins, margins[AGGREGATE])
            if sum(line_margins) > 0
            else float("nan")
        )
        for name, margin in margins.items():
            margin_rows.append(
                {
                    "level": level,
                    "line": name,
                    "var": var_quantile(columns[name], level),
                    "risk_margin": margin,
                    "diversification_benefit": benefit if name == AGGREGATE else float("nan"),
                }
            )

    ay_rows = []
    by_row = dist.by_accident_year
    for i in range(1, by_row.shape[2]):
        per_line = {name: by_row[:, n, i] for n, name in enumerate(dist.line_names)}
        per_line[AGGREGATE] = by_row[:, :, i].sum(axis=1)
        for name, samples in per_line.items():
            ay_rows.append(
                {
                    "accident_year": i + 1,
                    "line": name,
                    "mean": float(samples.mean()),
                    "sd": _sd(samples),
                }
            )

    return ReserveSummary(
        summary=pd.DataFrame(summary_rows),
        by_accident_year=pd.DataFrame(ay_rows),
        risk_margins=pd.DataFrame(margin_rows),
        density=pd.concat(density_frames, ignore_index=True),
    )


def reserves_frame(dist: ReserveDistribution) -> pd.DataFrame:
    """Wide per-draw table: draw, then one column per (line, accident year), then totals."""
    draws, n_lines, dim = dist.by_accident_year.shape
    data = {"draw": np.arange(draws)}
    for n, name in enumerate(dist.line_names):
        for i in range(1, dim):
            data[f"{name}:ay_{i + 1}"] = dist.by_accident_year[:, n, i]
        data[f"{name}:total"] = dist.line_totals[:, n]
    data[AGGREGATE] = dist.aggregate
    return pd.DataFrame(data)
