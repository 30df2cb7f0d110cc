"""Synthetic panels drawn from the evolutionary model."""

from typing import List, Optional, Tuple

import logfire
import numpy as np

from app.models.params import ObservationFamily, SimConfig
from app.models.results import TruthRecord
from app.models.triangle import TrianglePanel, upper_triangle_mask
from app.services import edf_service, state_space_service
from app.utils.parallel import map_items
from app.utils.rng import derive_seed, stream

# Configure logger
logger = logfire.with_settings(tags=[__name__])


def simulate_factors(config: SimConfig) -> TruthRecord:
    """
    Draw accident-year and calendar factor paths.

    Each line's accident-year walk and line-specific calendar shocks come
    from its own stream; the common shock has a stream of its own, so
    lines depend on each other only through it. Calendar paths run to
    2I - 1 when the lower triangle is requested.

    Args:
        config: Simulation configuration

    Returns:
        TruthRecord: Factor paths and every shock drawn
    """
    params = config.params
    dim = config.dim
    horizon = 2 * dim - 1 if config.include_lower else dim
    n_lines = config.n_lines
    variances = params.gamma_variances(config.extended)
    k = variances.shape[1]

    gamma = np.empty((n_lines, dim, k))
    gamma_shocks = np.empty((n_lines, dim - 1, k))
    line_shocks = np.empty((n_lines, horizon - 1))
    for n in range(n_lines):
        gamma[n, 0] = config.initial[n].gamma
        walk = stream(config.seed, "gamma", n)
        for i in range(1, dim):
            gamma[n, i] = state_space_service.evolve_gamma(gamma[n, i - 1], variances[n], walk)
            gamma_shocks[n, i - 1] = gamma[n, i] - gamma[n, i - 1]
        own = stream(config.seed, "calendar", n)
        line_shocks[n] = own.standard_normal(horizon - 1) * np.sqrt(params.lines[n].sigma2_h)

    common_shocks = stream(config.seed, "common-shock").standard_normal(horizon - 1) * np.sqrt(
        params.sigma2_h_tilde
    )
    lam = params.line_array("lam")
    psi = np.empty((n_lines, horizon))
    psi[:, 0] = [init.h1 for init in config.initial]
    for t in range(1, horizon):
        psi[:, t] = psi[:, t - 1] + line_shocks[:, t - 1] + lam * common_shocks[t - 1]

    return TruthRecord(
        gamma=gamma,
        psi=psi,
        gamma_shocks=gamma_shocks,
        line_shocks=line_shocks,
        common_shocks=common_shocks,
        extended=config.extended,
        line_names=[f"line_{n + 1}" for n in range(n_lines)],
    )


def cell_means(truth: TruthRecord, family: ObservationFamily) -> np.ndarray:
    """
    (N, I, I) means of every cell the calendar path reaches, NaN elsewhere.

    Log link for Tweedie lines, identity link for Gaussian lines.
    """
    dim = truth.dim
    design = state_space_service.design_matrix_A(1, dim, truth.extended)
    eta = truth.gamma @ design.T
    calendar = np.arange(dim)[:, None] + np.arange(dim)[None, :]
    reached = calendar < truth.psi.shape[1]
    h = truth.psi[:, np.where(reached, calendar, 0)]
    eta = np.where(reached, eta + h, np.nan)
    return np.exp(eta) if family == ObservationFamily.TWEEDIE else eta


def simulate_panel(config: SimConfig) -> Tuple[TrianglePanel, TruthRecord]:
    """
    Draw a panel and the truth behind it.

    Every upper-triangle cell is drawn from the observation family at its
    true mean. With ``include_lower`` the lower triangle is drawn too and
    kept in the truth record as holdout; with ``missing_rate`` > 0 a uniform
    random mask hides that share of the upper-triangle cells.

    Returns:
        Tuple[TrianglePanel, TruthRecord]: Incremental raw panel and truth record
    """
    with logfire.span("simulate_panel", dim=config.dim, lines=config.n_lines, seed=config.seed):
        truth = simulate_factors(config)
        family = config.params.family
        means = cell_means(truth, family)

        values = np.full_like(means, np.nan)
        defined = np.isfinite(means)
        for n, line in enumerate(config.params.lines):
            power = 0.0 if family == ObservationFamily.GAUSSIAN else line.p
            cells = stream(config.seed, "cells", n)
            values[n][defined[n]] = edf_service.tweedie_sample(
                means[n][defined[n]], line.phi, power, cells
            )

        upper = np.broadcast_to(upper_triangle_mask(config.dim), means.shape)
        mask = upper.copy()
        if config.missing_rate > 0:
            hidden = stream(config.seed, "mask").random(means.shape) < config.missing_rate
            mask &= ~hidden
            logger.info("Masked simulated cells", cells=int(np.sum(upper & hidden)))

        if config.include_lower:
            truth = truth.model_copy(update={"holdout": np.where(upper, np.nan, values)})

        exposures = (
            np.asarray(config.exposures, dtype=float)
            if config.exposures is not None
            else np.ones((config.n_lines, config.dim))
        )
        panel = TrianglePanel(
            values=np.where(mask, values, np.nan),
            mask=mask,
            exposures=exposures,
            line_names=truth.line_names,
        )
        logger.info("Simulated panel", observed=int(mask.sum()), family=family.value)
        return panel, truth


def replicates(
    config: SimConfig, count: int, workers: Optional[int] = None
) -> List[Tuple[TrianglePanel, TruthRecord]]:
    """Independent panels from the same configuration, each with its own derived seed."""
    configs = [
        config.model_copy(update={"seed": derive_seed(config.seed, "replicate", r)})
        for r in range(count)
    ]
    return map_items(simulate_panel, configs, workers)
