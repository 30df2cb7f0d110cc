"""Particle filter with parameter learning by kernel shrinkage."""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import logfire
import numpy as np
from scipy.special import logsumexp

from app.config import Config
from app.models.errors import DegeneracyError, DomainError
from app.models.params import (
    ObservationFamily,
    ParticleFilterConfig,
    PriorSpec,
    from_unconstrained,
    gamma_factor_names,
    parameter_names,
    to_unconstrained,
)
from app.models.results import ParticleCloud, StepSummary
from app.models.triangle import TrianglePanel
from app.services import edf_service, state_space_service
from app.utils.linalg import psd_factor, weighted_mean_cov
from app.utils.parallel import block_slices, map_blocks
from app.utils.rng import stream

# Configure logger
logger = logfire.with_settings(tags=[__name__])

_INIT_ATTEMPTS = 100


def normalize(log_weights: np.ndarray) -> np.ndarray:
    """
    Normalized weights from raw log-weights by log-sum-exp.

    Raises:
        DegeneracyError: If no log-weight is finite
    """
    log_weights = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(log_weights)
    if not finite.any():
        raise DegeneracyError("all particle weights are zero")
    total = logsumexp(log_weights[finite])
    weights = np.where(finite, np.exp(log_weights - total), 0.0)
    return weights / weights.sum()


def ess(weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(W^2)."""
    weights = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(weights**2))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Ancestor indices by systematic resampling: one uniform offset, M evenly spaced points.

    Particle m is copied floor(M W_m) or ceil(M W_m) times.
    """
    weights = np.asarray(weights, dtype=float)
    size = weights.size
    positions = (rng.random() + np.arange(size)) / size
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right").astype(np.int64)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> np.ndarray:
    """Weighted quantile along the particle axis (axis 0), lower convention."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, axis=0, kind="stable")
    ordered = np.take_along_axis(values, order, axis=0)
    cumulative = np.cumsum(weights[order], axis=0)
    index = np.minimum((cumulative < q - 1e-12).sum(axis=0), values.shape[0] - 1)
    return np.take_along_axis(ordered, index[None, ...], axis=0)[0]


@dataclass
class LookAhead:
    """Shrunk projections of the cloud and the previous cloud's kernel covariances."""

    theta: np.ndarray
    natural: np.ndarray
    psi: np.ndarray
    gamma: np.ndarray
    theta_factor: np.ndarray
    psi_factor: np.ndarray
    psi_free: np.ndarray


class ParticleFilter:
    """
    Joint on-line estimation of accident-year factors, calendar factors and parameters.

    Calendar factors are carried like static parameters: shrunk towards the
    cloud mean and rejuvenated, never propagated by their random walk.
    Accident-year blocks follow their random walk from row to row.
    """

    def __init__(self, prior: PriorSpec, config: Optional[ParticleFilterConfig] = None):
        self.prior = prior
        self.config = config or ParticleFilterConfig()
        self.family = prior.family
        self.extended = prior.extended
        self.n_lines = len(prior.lines)
        self.names = parameter_names(self.n_lines, self.extended, self.family)
        self.free = np.array([not prior.distribution(name).is_point for name in self.names])
        self.k = len(gamma_factor_names(self.extended))

    # Parameter bookkeeping

    def _columns(self, field: str) -> List[int]:
        return [self.names.index(f"{field}[{n}]") for n in range(1, self.n_lines + 1)]

    def _line_values(self, natural: np.ndarray, field: str) -> np.ndarray:
        """(M, N) values of a per-line field."""
        return natural[:, self._columns(field)]

    def _gamma_variances(self, natural: np.ndarray) -> np.ndarray:
        """(M, N, k) random-walk variances per particle."""
        fields = ["sigma2_a", "sigma2_r", "sigma2_s"]
        if self.extended:
            fields += ["sigma2_b1", "sigma2_b2"]
        return np.stack([self._line_values(natural, field) for field in fields], axis=2)

    def _power(self, natural: np.ndarray) -> np.ndarray:
        if self.family == ObservationFamily.GAUSSIAN:
            return np.zeros((natural.shape[0], self.n_lines))
        return self._line_values(natural, "p")

    def _to_theta(self, natural: np.ndarray) -> np.ndarray:
        columns = [
            to_unconstrained(name, natural[:, c])
            for c, name in enumerate(self.names)
            if self.free[c]
        ]
        return np.column_stack(columns) if columns else np.zeros((natural.shape[0], 0))

    def _to_natural(self, theta: np.ndarray, template: np.ndarray) -> np.ndarray:
        natural = template.copy()
        free_columns = np.flatnonzero(self.free)
        for d, c in enumerate(free_columns):
            natural[:, c] = from_unconstrained(self.names[c], theta[:, d])
        return natural

    def _valid_rows(self, natural: np.ndarray) -> np.ndarray:
        valid = np.all(np.isfinite(natural), axis=1)
        for c, name in enumerate(self.names):
            base = name.split("[")[0]
            column = natural[:, c]
            if base.startswith("sigma2"):
                valid &= column > 0 if self.free[c] else column >= 0
            elif base == "phi":
                valid &= column > 0
            elif base == "p":
                if self.free[c]:
                    valid &= (column > 1.0) & (column < 2.0)
                else:
                    valid &= (column == 0.0) | ((column >= 1.0) & (column <= 2.0))
        return valid

    def _draw_parameters(self, block: int, size: int) -> np.ndarray:
        """Prior draws for one block, redrawing particles with invalid values."""
        natural = np.empty((size, len(self.names)))
        pending = np.arange(size)
        for attempt in range(_INIT_ATTEMPTS):
            rng = stream(self.config.seed, "init-params", block, attempt)
            for c, name in enumerate(self.names):
                natural[pending, c] = self.prior.distribution(name).draw(rng, pending.size)
            pending = pending[~self._valid_rows(natural[pending])]
            if not pending.size:
                return natural
            logger.debug("Redrawing invalid prior draws", block=block, particles=int(pending.size))
        raise DomainError(
            f"prior keeps producing invalid parameters after {_INIT_ATTEMPTS} attempts"
        )

    # Likelihood

    def row_log_likelihood(
        self,
        gamma: np.ndarray,
        psi: np.ndarray,
        natural: np.ndarray,
        panel: TrianglePanel,
        i: int,
    ) -> np.ndarray:
        """
        Log-likelihood of row ``i``'s observed cells for every particle.

        Masked cells contribute nothing. Particles whose means overflow get -inf.

        Returns:
            np.ndarray: (M,) row log-likelihoods
        """
        design = state_space_service.design_matrix_A(i, panel.dim, self.extended)
        row_mask = panel.mask[:, i - 1, : design.shape[0]]
        lines, cols = np.nonzero(row_mask)
        if not lines.size:
            return np.zeros(gamma.shape[0])
        y = panel.values[lines, i - 1, cols]
        phi = self._line_values(natural, "phi")
        power = self._power(natural)

        def block_likelihood(_: int, part: slice) -> np.ndarray:
            eta = state_space_service.row_predictor(gamma[part], psi[part], i, design)
            if np.any(np.isnan(eta)):
                raise DegeneracyError(f"non-finite linear predictor at accident year {i}")
            eta = eta[:, lines, cols]
            if self.family == ObservationFamily.GAUSSIAN:
                cells = edf_service.gaussian_log_pdf(y, eta, phi[part][:, lines])
                return cells.sum(axis=1)
            with np.errstate(over="ignore"):
                mu = np.exp(eta)
            usable = np.all(np.isfinite(mu) & (mu > 0), axis=1)
            out = np.full(mu.shape[0], -np.inf)
            if usable.any():
                cells = edf_service.tweedie_log_pdf(
                    y, mu[usable], phi[part][usable][:, lines], power[part][usable][:, lines]
                )
                out[usable] = cells.sum(axis=1)
            return out

        blocks = map_blocks(
            block_likelihood, gamma.shape[0], self.config.block_size, self.config.workers
        )
        return np.concatenate(blocks)

    def _row_means(
        self, gamma: np.ndarray, psi: np.ndarray, weights: np.ndarray, i: int, dim: int
    ) -> np.ndarray:
        """(N, J_i) weighted mean of the fitted cell means of row ``i``."""
        design = state_space_service.design_matrix_A(i, dim, self.extended)
        eta = state_space_service.row_predictor(gamma, psi, i, design)
        if self.family == ObservationFamily.TWEEDIE:
            with np.errstate(over="ignore"):
                eta = np.exp(eta)
        return np.tensordot(weights, eta, axes=1)

    # Filter steps

    def initialize(self, panel: TrianglePanel) -> ParticleCloud:
        """
        Draw the initial cloud and weight it by row 1.

        Parameters come from their priors; h_1 from its prior (or zero when
        anchored) and h_2 ... h_I by simulating the calendar evolution with each
        particle's parameters; the first accident-year block from its prior.
        """
        if panel.n_lines != self.n_lines:
            raise ValueError(f"prior covers {self.n_lines} lines, panel has {panel.n_lines}")
        size = self.config.particles
        dim = panel.dim
        slices = block_slices(size, self.config.block_size)
        natural = np.concatenate(
            [self._draw_parameters(b, part.stop - part.start) for b, part in enumerate(slices)]
        )

        h1_mean = np.array([line.h1_mean for line in self.prior.lines])
        h1_sd = np.sqrt([line.h1_var for line in self.prior.lines])
        gamma_mean = np.array([line.gamma_mean for line in self.prior.lines])
        gamma_factor = np.stack(
            [psd_factor(np.asarray(line.gamma_cov, dtype=float)) for line in self.prior.lines]
        )

        psi = np.empty((size, self.n_lines, dim))
        gamma = np.empty((size, self.n_lines, self.k))
        sigma2_h = self._line_values(natural, "sigma2_h")
        lam = self._line_values(natural, "lam")
        shared = natural[:, self.names.index("sigma2_h_tilde")]
        for b, part in enumerate(slices):
            rng = stream(self.config.seed, "init-factors", b)
            count = part.stop - part.start
            if self.prior.anchor_h1_to_zero:
                h1 = np.zeros((count, self.n_lines))
            else:
                h1 = h1_mean + h1_sd * rng.standard_normal((count, self.n_lines))
            psi[part] = state_space_service.simulate_calendar(
                h1, sigma2_h[part], lam[part], shared[part], dim, rng
            )
            noise = rng.standard_normal((count, self.n_lines, self.k))
            gamma[part] = gamma_mean + np.einsum("nkl,mnl->mnk", gamma_factor, noise)

        psi_free = np.ones((self.n_lines, dim), dtype=bool)
        if self.prior.anchor_h1_to_zero:
            psi_free[:, 0] = False

        gamma_path = np.zeros((size, dim, self.n_lines, self.k))
        gamma_path[:, 0] = gamma
        log_weights = self.row_log_likelihood(gamma, psi, natural, panel, 1)
        weights = normalize(log_weights)

        cloud = ParticleCloud(
            parameter_names=self.names,
            free=self.free,
            natural=natural,
            theta=self._to_theta(natural),
            gamma=gamma,
            gamma_path=gamma_path,
            psi=psi,
            psi_free=psi_free,
            log_weights=log_weights,
            step=1,
            extended=self.extended,
            family=self.family.value,
        )
        finite_share = float(np.mean(np.isfinite(log_weights)))
        logger.info("Initialized particle cloud", particles=size, finite_share=finite_share)
        cloud.history.append(
            self._summarize(cloud, weights, panel, zero_lookahead=0, fitted_previous=None)
        )
        return cloud

    def shrink_lookahead(self, cloud: ParticleCloud, weights: np.ndarray) -> LookAhead:
        """
        Shrink parameters and calendar factors towards their weighted cloud mean.

        theta~ = xi theta + (1 - xi) theta_bar, likewise for the learned calendar
        entries; the accident-year look-ahead is the previous block itself.
        The kernel covariances of the current cloud are factored for
        :meth:`rejuvenate`.
        """
        xi = self.config.xi
        theta, theta_factor = self._shrink(cloud.theta, weights, xi)

        flat = cloud.psi.reshape(cloud.size, -1)
        free = cloud.psi_free.reshape(-1)
        shrunk, psi_factor = self._shrink(flat[:, free], weights, xi)
        psi = flat.copy()
        psi[:, free] = shrunk

        return LookAhead(
            theta=theta,
            natural=self._to_natural(theta, cloud.natural),
            psi=psi.reshape(cloud.psi.shape),
            gamma=cloud.gamma,
            theta_factor=theta_factor,
            psi_factor=psi_factor,
            psi_free=np.flatnonzero(free),
        )

    @staticmethod
    def _shrink(
        samples: np.ndarray, weights: np.ndarray, xi: float
    ) -> Tuple[np.ndarray, np.ndarray]:
        if samples.shape[1] == 0:
            return samples.copy(), np.zeros((0, 0))
        mean, cov = weighted_mean_cov(samples, weights)
        return xi * samples + (1.0 - xi) * mean, psd_factor(cov)

    def lookahead_weights(
        self, cloud: ParticleCloud, lookahead: LookAhead, panel: TrianglePanel, i: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Raw look-ahead log-weights log omega_{i-1} + log f(Y_i | look-ahead particle).

        Returns:
            Tuple[np.ndarray, np.ndarray]: Raw log-weights and the look-ahead row log-likelihoods
        """
        loglik = self.row_log_likelihood(
            lookahead.gamma, lookahead.psi, lookahead.natural, panel, i
        )
        with np.errstate(invalid="ignore"):
            raw = cloud.log_weights + loglik
        raw = np.where(np.isnan(raw), -np.inf, raw)
        return raw, loglik

    def rejuvenate(
        self, lookahead: LookAhead, ancestors: np.ndarray, i: int
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """
        Filtered draws around the resampled look-aheads.

        theta ~ N(theta~, (1 - xi^2) Sigma_theta), psi likewise on its learned
        entries; gamma_i from the random walk with each particle's new variances.
        Noise is skipped entirely when xi = 1.

        Returns:
            Tuple: theta, natural, psi and gamma of the filtered cloud
        """
        xi = self.config.xi
        spread = np.sqrt(max(1.0 - xi**2, 0.0))
        theta = lookahead.theta[ancestors]
        psi = lookahead.psi[ancestors].reshape(ancestors.size, -1)
        gamma_prev = lookahead.gamma[ancestors]
        size = ancestors.size
        theta_noise = np.zeros_like(theta)
        psi_noise = np.zeros((size, lookahead.psi_free.size))
        gamma_noise = np.empty_like(gamma_prev)

        for b, part in enumerate(block_slices(size, self.config.block_size)):
            count = part.stop - part.start
            if spread > 0 and theta.shape[1]:
                rng = stream(self.config.seed, "rejuvenate-theta", i, b)
                draws = rng.standard_normal((count, theta.shape[1]))
                theta_noise[part] = draws @ lookahead.theta_factor.T
            if spread > 0 and psi_noise.shape[1]:
                rng = stream(self.config.seed, "rejuvenate-psi", i, b)
                draws = rng.standard_normal((count, psi_noise.shape[1]))
                psi_noise[part] = draws @ lookahead.psi_factor.T
            rng = stream(self.config.seed, "evolve-gamma", i, b)
            gamma_noise[part] = rng.standard_normal(gamma_prev[part].shape)

        theta = theta + spread * theta_noise
        natural = self._to_natural(theta, lookahead.natural[ancestors])
        if psi_noise.shape[1]:
            psi[:, lookahead.psi_free] += spread * psi_noise
        gamma = gamma_prev + gamma_noise * np.sqrt(self._gamma_variances(natural))
        return theta, natural, psi.reshape(lookahead.psi.shape), gamma

    def correction_weights(
        self,
        gamma: np.ndarray,
        psi: np.ndarray,
        natural: np.ndarray,
        lookahead_loglik: np.ndarray,
        panel: TrianglePanel,
        i: int,
    ) -> Tuple[np.ndarray, int]:
        """
        log omega_i = log f(Y_i | filtered) - log f(Y_i | look-ahead) per resampled particle.

        Returns:
            Tuple[np.ndarray, int]: Log-weights and the count of zero look-ahead likelihoods
        """
        filtered = self.row_log_likelihood(gamma, psi, natural, panel, i)
        zero = ~np.isfinite(lookahead_loglik)
        with np.errstate(invalid="ignore"):
            log_weights = np.where(zero, -np.inf, filtered - lookahead_loglik)
        log_weights = np.where(np.isnan(log_weights), -np.inf, log_weights)
        return log_weights, int(zero.sum())

    def step(self, cloud: ParticleCloud, panel: TrianglePanel) -> ParticleCloud:
        """Advance the cloud by one accident year."""
        i = cloud.step + 1
        with logfire.span("particle_step", step=i, particles=cloud.size):
            weights = normalize(cloud.log_weights)
            lookahead = self.shrink_lookahead(cloud, weights)
            fitted_previous = self._row_means(lookahead.gamma, lookahead.psi, weights, i, panel.dim)

            raw, lookahead_loglik = self.lookahead_weights(cloud, lookahead, panel, i)
            zero_lookahead = int(np.sum(~np.isfinite(lookahead_loglik)))
            if zero_lookahead:
                logger.warn("Zero look-ahead likelihoods", step=i, particles=zero_lookahead)
            lookahead_normalized = normalize(raw)

            ancestors = systematic_resample(
                lookahead_normalized, stream(self.config.seed, "resample", i)
            )
            theta, natural, psi, gamma = self.rejuvenate(lookahead, ancestors, i)
            log_weights, _ = self.correction_weights(
                gamma, psi, natural, lookahead_loglik[ancestors], panel, i
            )
            if not np.any(np.isfinite(log_weights)):
                raise DegeneracyError(f"total weight collapse at accident year {i}")

            gamma_path = cloud.gamma_path[ancestors]
            gamma_path[:, i - 1] = gamma
            updated = cloud.model_copy(
                update={
                    "natural": natural,
                    "theta": theta,
                    "gamma": gamma,
                    "gamma_path": gamma_path,
                    "psi": psi,
                    "log_weights": log_weights,
                    "step": i,
                    "history": list(cloud.history),
                }
            )
            updated.history.append(
                self._summarize(
                    updated,
                    normalize(log_weights),
                    panel,
                    zero_lookahead=zero_lookahead,
                    fitted_previous=fitted_previous,
                )
            )
            return updated

    def run(self, panel: TrianglePanel) -> ParticleCloud:
        """
        Filter every accident year of ``panel``.

        Returns:
            ParticleCloud: Final cloud with one summary per accident year in ``history``
        """
        with logfire.span(
            "particle_filter",
            particles=self.config.particles,
            xi=self.config.xi,
            dim=panel.dim,
            lines=panel.n_lines,
        ):
            cloud = self.initialize(panel)
            for _ in range(2, panel.dim + 1):
                cloud = self.step(cloud, panel)
            logger.info(
                "Particle filter complete",
                steps=cloud.step,
                final_ess=cloud.history[-1].ess,
            )
            return cloud

    def _summarize(
        self,
        cloud: ParticleCloud,
        weights: np.ndarray,
        panel: TrianglePanel,
        zero_lookahead: int,
        fitted_previous: Optional[np.ndarray],
    ) -> StepSummary:
        size = cloud.size
        effective = ess(weights)
        if effective < max(Config.ESS_WARNING_FRACTION * size, 1.0 + 1e-9):
            logger.warn("Particle degeneracy", step=cloud.step, ess=effective, particles=size)
        logger.debug("Particle step complete", step=cloud.step, ess=effective)

        def moments(values: np.ndarray) -> Tuple[np.ndarray, ...]:
            mean = np.tensordot(weights, values, axes=1)
            variance = np.tensordot(weights, (values - mean) ** 2, axes=1)
            return (
                mean,
                weighted_quantile(values, weights, 0.05),
                weighted_quantile(values, weights, 0.95),
                np.sqrt(variance / effective),
            )

        gamma_mean, gamma_q05, gamma_q95, gamma_se = moments(cloud.gamma)
        psi_mean, psi_q05, psi_q95, psi_se = moments(cloud.psi)
        param_mean, param_q05, param_q95, _ = moments(cloud.natural)
        return StepSummary(
            step=cloud.step,
            ess=effective,
            zero_lookahead=zero_lookahead,
            gamma_mean=gamma_mean,
            gamma_q05=gamma_q05,
            gamma_q95=gamma_q95,
            gamma_se=gamma_se,
            psi_mean=psi_mean,
            psi_q05=psi_q05,
            psi_q95=psi_q95,
            psi_se=psi_se,
            param_mean=param_mean,
            param_q05=param_q05,
            param_q95=param_q95,
            fitted_current=self._row_means(cloud.gamma, cloud.psi, weights, cloud.step, panel.dim),
            fitted_previous=fitted_previous,
        )
