"""Dual Kalman filter for Gaussian panels, its exact log-likelihood and MLE."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import logfire
import numpy as np
from scipy import optimize
from scipy.linalg import block_diag

from app.models.errors import ReservingError
from app.models.params import (
    KalmanConfig,
    ModelParams,
    ObservationFamily,
    PriorSpec,
    from_unconstrained,
    parameter_names,
    to_unconstrained,
)
from app.models.results import KalmanRun, KalmanState, KalmanStep, MleReport
from app.models.triangle import TrianglePanel
from app.services import state_space_service
from app.utils.linalg import nearest_psd, solve_psd, symmetrize
from app.utils.rng import stream

# Configure logger
logger = logfire.with_settings(tags=[__name__])

_LOG_2PI = float(np.log(2.0 * np.pi))
_INFEASIBLE = 1e12


@dataclass(frozen=True)
class InitialMoments:
    """Prior moments of the first accident-year blocks and of h_1, one entry per line."""

    gamma_mean: np.ndarray
    gamma_cov: np.ndarray
    h1_mean: np.ndarray
    h1_var: np.ndarray

    @classmethod
    def from_prior(cls, prior: PriorSpec) -> "InitialMoments":
        anchored = prior.anchor_h1_to_zero
        return cls(
            gamma_mean=np.array([line.gamma_mean for line in prior.lines], dtype=float),
            gamma_cov=np.array([line.gamma_cov for line in prior.lines], dtype=float),
            h1_mean=np.array([0.0 if anchored else line.h1_mean for line in prior.lines]),
            h1_var=np.array([0.0 if anchored else line.h1_var for line in prior.lines]),
        )


class DualKalmanFilter:
    """
    Kalman filtering of the Gaussian model with the calendar block as a learnable static.

    The ``dual`` scheme updates the calendar block with the previous
    accident-year estimate in its innovation and then the accident-year block
    with the fresh calendar estimate. The ``joint`` scheme conditions the
    stacked state [gamma; psi] in one update and carries their
    cross-covariance.
    """

    def __init__(
        self,
        params: ModelParams,
        extended: bool = False,
        config: Optional[KalmanConfig] = None,
    ):
        if params.family != ObservationFamily.GAUSSIAN:
            raise ValueError("the Kalman filter needs Gaussian model parameters")
        self.params = params
        self.extended = extended
        self.config = config or KalmanConfig()

    def init(self, moments: InitialMoments, dim: int) -> KalmanState:
        """
        Prior moments at accident year 1.

        Calendar moments are the closed-form random-walk moments, or sample
        moments of simulated paths when ``psi_init`` is ``simulated``.

        Raises:
            ValueError: If a supplied covariance is not positive semidefinite
        """
        for n, cov in enumerate(moments.gamma_cov):
            if np.linalg.eigvalsh(symmetrize(cov)).min() < -1e-10:
                raise ValueError(f"line {n + 1}: gamma covariance is not positive semidefinite")
        if np.any(moments.h1_var < 0):
            raise ValueError("h_1 variance must be non-negative")

        if self.config.psi_init == "exact":
            psi_mean, psi_cov = state_space_service.psi_moments_exact(
                self.params, dim, moments.h1_mean, moments.h1_var
            )
        else:
            psi_mean, psi_cov = self._simulated_psi_moments(moments, dim)

        diagonal = np.diag(psi_cov)
        scale = float(diagonal.mean()) if diagonal.size and diagonal.mean() > 0 else 1.0
        return KalmanState(
            psi_mean=psi_mean,
            psi_cov=psi_cov,
            gamma_mean=moments.gamma_mean.reshape(-1),
            gamma_cov=block_diag(*moments.gamma_cov),
            cross_cov=(
                np.zeros((moments.gamma_mean.size, psi_mean.size))
                if self.config.update_scheme == "joint"
                else None
            ),
            step=1,
            artificial_noise=self.config.artificial_noise * scale,
        )

    def _simulated_psi_moments(
        self, moments: InitialMoments, dim: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        rng = stream(self.config.seed, "kalman-init")
        paths = self.config.init_paths
        h1 = moments.h1_mean + np.sqrt(moments.h1_var) * rng.standard_normal(
            (paths, self.params.n_lines)
        )
        simulated = state_space_service.simulate_calendar(
            h1,
            self.params.line_array("sigma2_h"),
            self.params.line_array("lam"),
            np.asarray(self.params.sigma2_h_tilde),
            dim,
            rng,
        ).reshape(paths, -1)
        return simulated.mean(axis=0), symmetrize(np.cov(simulated, rowvar=False))

    # Updates

    def _gain_update(
        self,
        mean: np.ndarray,
        cov: np.ndarray,
        design: np.ndarray,
        innovation: np.ndarray,
        noise: np.ndarray,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Kalman gain, posterior mean and posterior covariance for one linear observation."""
        projected = design @ cov
        innovation_cov = symmetrize(projected @ design.T + noise)
        solved, _ = solve_psd(innovation_cov, projected)
        gain = solved.T
        posterior_mean = mean + gain @ innovation
        if self.config.joseph:
            residual = np.eye(cov.shape[0]) - gain @ design
            posterior_cov = residual @ cov @ residual.T + gain @ noise @ gain.T
        else:
            posterior_cov = cov - gain @ projected
        return gain, posterior_mean, self._checked(posterior_cov)

    @staticmethod
    def _checked(cov: np.ndarray) -> np.ndarray:
        cov = symmetrize(cov)
        if cov.size and np.linalg.eigvalsh(cov).min() < -1e-8 * max(1.0, np.abs(cov).max()):
            logger.warn("Posterior covariance lost positive semidefiniteness, projecting")
            return nearest_psd(cov)
        return cov

    def update_calendar(
        self, state: KalmanState, y: np.ndarray, A: np.ndarray, E: np.ndarray, H: np.ndarray
    ) -> KalmanState:
        """Calendar update: innovation y - A gamma~ - E psi~, gain psi_P E' (E psi_P E' + H)^-1."""
        innovation = y - A @ state.gamma_mean - E @ state.psi_mean
        _, mean, cov = self._gain_update(state.psi_mean, state.psi_cov, E, innovation, H)
        return state.model_copy(update={"psi_mean": mean, "psi_cov": cov})

    def update_gamma(
        self, state: KalmanState, y: np.ndarray, A: np.ndarray, E: np.ndarray, H: np.ndarray
    ) -> KalmanState:
        """Accident-year update with innovation y - A gamma~ - E psi_hat."""
        innovation = y - A @ state.gamma_mean - E @ state.psi_mean
        _, mean, cov = self._gain_update(state.gamma_mean, state.gamma_cov, A, innovation, H)
        return state.model_copy(update={"gamma_mean": mean, "gamma_cov": cov})

    def update_joint(
        self, state: KalmanState, y: np.ndarray, A: np.ndarray, E: np.ndarray, H: np.ndarray
    ) -> KalmanState:
        """Exact conditioning of the stacked state [gamma; psi] on one row."""
        k = state.gamma_mean.size
        cross = state.cross_cov
        if cross is None:
            cross = np.zeros((k, state.psi_mean.size))
        mean = np.concatenate([state.gamma_mean, state.psi_mean])
        cov = np.block([[state.gamma_cov, cross], [cross.T, state.psi_cov]])
        design = np.hstack([A, E])
        _, mean, cov = self._gain_update(mean, cov, design, y - design @ mean, H)
        return state.model_copy(
            update={
                "gamma_mean": mean[:k],
                "psi_mean": mean[k:],
                "gamma_cov": cov[:k, :k],
                "psi_cov": cov[k:, k:],
                "cross_cov": cov[:k, k:],
            }
        )

    def predict(self, state: KalmanState) -> KalmanState:
        """Time update: gamma gets its random-walk variances, psi the artificial dynamic."""
        q_gamma = np.diag(self.params.gamma_variances(self.extended).reshape(-1))
        return state.model_copy(
            update={
                "gamma_cov": state.gamma_cov + q_gamma,
                "psi_cov": state.psi_cov + state.artificial_noise * np.eye(state.psi_mean.size),
                "step": state.step + 1,
            }
        )

    # Filtering

    def _observed_system(
        self, panel: TrianglePanel, i: int
    ) -> Tuple[state_space_service.GaussianSystem, np.ndarray, np.ndarray]:
        system = state_space_service.build_gaussian_system(i, panel.dim, self.params, self.extended)
        width = panel.dim - i + 1
        observed = np.flatnonzero(panel.mask[:, i - 1, :width].reshape(-1))
        y = panel.values[:, i - 1, :width].reshape(-1)[observed]
        return system, observed, y

    def _innovation(
        self, state: KalmanState, A: np.ndarray, E: np.ndarray, H: np.ndarray, y: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Prior innovation and its covariance A gP A' + E hP E' + H (+ cross terms)."""
        innovation = y - A @ state.gamma_mean - E @ state.psi_mean
        cov = A @ state.gamma_cov @ A.T + E @ state.psi_cov @ E.T + H
        if state.cross_cov is not None:
            cross = A @ state.cross_cov @ E.T
            cov = cov + cross + cross.T
        return innovation, symmetrize(cov)

    def filter_step(
        self, state: KalmanState, panel: TrianglePanel, i: int
    ) -> Tuple[KalmanState, KalmanStep]:
        """Condition the prior at accident year ``i`` on row ``i``."""
        system, observed, y = self._observed_system(panel, i)
        prior_fit = system.A @ state.gamma_mean + system.E @ state.psi_mean
        A = system.A[observed]
        E = system.E[observed]
        H = system.H[np.ix_(observed, observed)]

        innovation, innovation_cov = self._innovation(state, A, E, H, y)
        log_likelihood = 0.0
        if observed.size:
            solved, log_det = solve_psd(innovation_cov, innovation)
            log_likelihood = -0.5 * (
                observed.size * _LOG_2PI + log_det + float(innovation @ solved)
            )
            if self.config.update_scheme == "joint":
                state = self.update_joint(state, y, A, E, H)
            else:
                state = self.update_calendar(state, y, A, E, H)
                state = self.update_gamma(state, y, A, E, H)

        shape = (panel.n_lines, panel.dim - i + 1)
        posterior_fit = system.A @ state.gamma_mean + system.E @ state.psi_mean
        record = KalmanStep(
            step=i,
            gamma_mean=state.gamma_mean,
            gamma_cov=state.gamma_cov,
            psi_mean=state.psi_mean,
            psi_cov=state.psi_cov,
            innovation=innovation,
            innovation_cov=innovation_cov,
            log_likelihood=log_likelihood,
            fitted_current=posterior_fit.reshape(shape),
            fitted_previous=prior_fit.reshape(shape),
        )
        return state, record

    def run(self, panel: TrianglePanel, moments: InitialMoments) -> KalmanRun:
        """
        Filter every accident year of a Gaussian panel.

        Returns:
            KalmanRun: Per-step posteriors, innovations and likelihood contributions
        """
        if panel.n_lines != self.params.n_lines:
            raise ValueError(
                f"parameters cover {self.params.n_lines} lines, panel has {panel.n_lines}"
            )
        with logfire.span("kalman_filter", dim=panel.dim, scheme=self.config.update_scheme):
            state = self.init(moments, panel.dim)
            steps: List[KalmanStep] = []
            for i in range(1, panel.dim + 1):
                if i > 1:
                    state = self.predict(state)
                state, record = self.filter_step(state, panel, i)
                steps.append(record)
            run = KalmanRun(
                steps=steps,
                final_state=state,
                extended=self.extended,
                update_scheme=self.config.update_scheme,
            )
            logger.debug("Kalman filter complete", log_likelihood=run.log_likelihood)
            return run

    def log_likelihood(self, panel: TrianglePanel, moments: InitialMoments) -> float:
        """Gaussian log-likelihood -1/2 sum_i [d_i log 2pi + log|F_i| + v_i' F_i^-1 v_i]."""
        return self.run(panel, moments).log_likelihood


def mle_parameter_names(
    start: ModelParams, extended: bool, free: Optional[Sequence[str]]
) -> List[str]:
    """Names estimated by :func:`fit_mle`: given ones, else every nonzero start value."""
    names = parameter_names(start.n_lines, extended, ObservationFamily.GAUSSIAN)
    if free is not None:
        unknown = set(free) - set(names)
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)}")
        return [name for name in names if name in free]
    flat = start.flatten(extended)
    return [name for name in names if name.startswith("lam") or flat[name] != 0.0]


def fit_mle(
    panel: TrianglePanel,
    start: ModelParams,
    moments: InitialMoments,
    extended: bool = False,
    config: Optional[KalmanConfig] = None,
    free: Optional[Sequence[str]] = None,
    max_iter: int = 200,
) -> Tuple[ModelParams, MleReport]:
    """
    Maximize the Gaussian log-likelihood over the free parameters.

    Variances and dispersions are searched on the log scale, loadings as is,
    with L-BFGS-B and finite-difference gradients. The result is never worse
    than the start; a run that ends without convergence returns its best
    point with ``converged`` False.

    Returns:
        Tuple[ModelParams, MleReport]: Estimates and convergence report

    Raises:
        ValueError: When the start point has no finite log-likelihood
    """
    config = config or KalmanConfig()
    names = mle_parameter_names(start, extended, free)
    base = start.flatten(extended)
    x0 = np.array([float(to_unconstrained(name, base[name])) for name in names])
    if not np.all(np.isfinite(x0)):
        raise ValueError("free variances need positive start values")

    def params_at(x: np.ndarray) -> ModelParams:
        flat = dict(base)
        for name, value in zip(names, x):
            flat[name] = float(from_unconstrained(name, value))
        return ModelParams.from_flat(flat, start.n_lines, ObservationFamily.GAUSSIAN, start)

    def objective(x: np.ndarray) -> float:
        try:
            value = DualKalmanFilter(params_at(x), extended, config).log_likelihood(panel, moments)
        except (ReservingError, ValueError, np.linalg.LinAlgError):
            return _INFEASIBLE
        return -value if np.isfinite(value) else _INFEASIBLE

    with logfire.span("fit_mle", parameters=len(names)):
        start_value = -objective(x0)
        if start_value <= -_INFEASIBLE:
            raise ValueError("the MLE start point has no finite log-likelihood")
        result = optimize.minimize(
            objective, x0, method="L-BFGS-B", options={"maxiter": max_iter}
        )
        best = result.x if -result.fun >= start_value else x0
        best_value = max(-float(result.fun), start_value)
        gradient = optimize.approx_fprime(best, objective, 1e-6)
        report = MleReport(
            converged=bool(result.success),
            iterations=int(result.nit),
            gradient_norm=float(np.linalg.norm(gradient)),
            log_likelihood=best_value,
            start_log_likelihood=start_value,
            free_parameters=names,
            message=str(result.message),
        )
        if not report.converged:
            logger.warn(
                "MLE did not converge", iterations=report.iterations, message=report.message
            )
        logger.info(
            "MLE complete", log_likelihood=best_value, iterations=report.iterations
        )
        return params_at(best), report
