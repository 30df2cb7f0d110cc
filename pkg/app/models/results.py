"""Result containers produced by the estimation, forecasting and diagnostic services."""

from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.models.params import gamma_factor_names


class GlmFit(BaseModel):
    """Static Tweedie GLM fit of one line."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    structure: str = Field(..., description="Mean structure name")
    p: float = Field(..., description="Fixed Tweedie power")
    coefficient_names: List[str] = Field(..., description="Names matching coefficients")
    coefficients: np.ndarray = Field(..., description="Estimated coefficients")
    covariance: np.ndarray = Field(..., description="phi_hat * (X'WX)^-1")
    accident: np.ndarray = Field(..., description="1-based accident index per observed cell")
    development: np.ndarray = Field(..., description="1-based development index per observed cell")
    observed: np.ndarray = Field(..., description="Observed values")
    fitted_means: np.ndarray = Field(..., description="Fitted means per observed cell")
    pearson_residuals: np.ndarray = Field(..., description="(y - mu) / sqrt(mu^p)")
    dispersion_estimate: float = Field(..., description="Pearson-based phi_hat")
    deviance: float = Field(..., description="Tweedie deviance at the fit")
    score_norm: float = Field(..., description="Norm of the quasi-score at the fit")
    iterations: int = Field(..., description="IRLS iterations used")
    dim: int = Field(..., description="Triangle dimension I")

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.coefficient_names.index(name)])

    def fitted_grid(self) -> np.ndarray:
        """(I, I) grid of fitted means, NaN where no cell was fitted."""
        grid = np.full((self.dim, self.dim), np.nan)
        grid[self.accident - 1, self.development - 1] = self.fitted_means
        return grid


class KalmanState(BaseModel):
    """Moments carried by the dual Kalman filter between accident years."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    psi_mean: np.ndarray = Field(..., description="Stacked calendar factor mean (N*I)")
    psi_cov: np.ndarray = Field(..., description="Calendar factor covariance")
    gamma_mean: np.ndarray = Field(..., description="Stacked accident-year factor mean (N*k)")
    gamma_cov: np.ndarray = Field(..., description="Accident-year factor covariance")
    cross_cov: Optional[np.ndarray] = Field(
        None, description="Cov(gamma, psi), carried by the joint update scheme only"
    )
    step: int = Field(1, description="Accident index the moments refer to")
    artificial_noise: float = Field(0.0, ge=0, description="Scalar level of the psi dynamic")


class KalmanStep(BaseModel):
    """Filter output for one accident year."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int
    gamma_mean: np.ndarray
    gamma_cov: np.ndarray
    psi_mean: np.ndarray
    psi_cov: np.ndarray
    innovation: np.ndarray = Field(..., description="Prior innovation on observed cells")
    innovation_cov: np.ndarray = Field(..., description="Its covariance F_i")
    log_likelihood: float = Field(..., description="Contribution of this row")
    fitted_current: np.ndarray = Field(..., description="(N, J_i) filtered fit of row i")
    fitted_previous: np.ndarray = Field(..., description="(N, J_i) prior prediction of row i")


class KalmanRun(BaseModel):
    """Complete dual Kalman filter pass."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    steps: List[KalmanStep]
    final_state: KalmanState
    extended: bool
    update_scheme: str

    @property
    def log_likelihood(self) -> float:
        return float(sum(step.log_likelihood for step in self.steps))


class StepSummary(BaseModel):
    """Posterior summaries of the particle cloud after one accident year."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int
    ess: float
    zero_lookahead: int = Field(0, description="Particles whose look-ahead likelihood was zero")
    gamma_mean: np.ndarray = Field(..., description="(N, k) weighted mean of gamma_i")
    gamma_q05: np.ndarray
    gamma_q95: np.ndarray
    psi_mean: np.ndarray = Field(..., description="(N, I) weighted mean of the calendar factors")
    psi_q05: np.ndarray
    psi_q95: np.ndarray
    psi_se: np.ndarray = Field(..., description="(N, I) Monte Carlo standard error of psi_mean")
    gamma_se: np.ndarray = Field(..., description="(N, k) Monte Carlo standard error of gamma_mean")
    param_mean: np.ndarray = Field(..., description="Weighted mean per flat parameter")
    param_q05: np.ndarray
    param_q95: np.ndarray
    fitted_current: np.ndarray = Field(..., description="(N, J_i) filtered fit of row i")
    fitted_previous: Optional[np.ndarray] = Field(
        None, description="(N, J_i) look-ahead fit of row i from the previous cloud"
    )


class ParticleCloud(BaseModel):
    """
    M weighted particles of factors and static parameters.

    ``natural`` holds every flat parameter on its natural scale, fixed ones
    included; ``theta`` holds only the learned ones in unconstrained form.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    parameter_names: Tuple[str, ...]
    free: np.ndarray = Field(..., description="Boolean mask of learned parameters")
    natural: np.ndarray = Field(..., description="(M, P) natural-scale parameters")
    theta: np.ndarray = Field(..., description="(M, d) unconstrained learned parameters")
    gamma: np.ndarray = Field(..., description="(M, N, k) current accident-year blocks")
    gamma_path: np.ndarray = Field(..., description="(M, I, N, k) ancestral gamma paths")
    psi: np.ndarray = Field(..., description="(M, N, I) calendar factors")
    psi_free: np.ndarray = Field(..., description="(N, I) mask of learned calendar entries")
    log_weights: np.ndarray = Field(..., description="Raw log-weights omega_i")
    step: int = 0
    extended: bool = False
    family: str = "tweedie"
    history: List[StepSummary] = Field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.log_weights.shape[0])

    def column(self, name: str) -> np.ndarray:
        """Natural-scale values of one flat parameter across particles."""
        return self.natural[:, self.parameter_names.index(name)]


class ReserveDistribution(BaseModel):
    """Joint outstanding-claims draws by line and accident year."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    by_accident_year: np.ndarray = Field(..., description="(S, N, I) draws")
    line_names: List[str]
    provenance: Dict[str, Any] = Field(default_factory=dict)

    @property
    def line_totals(self) -> np.ndarray:
        """(S, N) per-line totals."""
        return self.by_accident_year.sum(axis=2)

    @property
    def aggregate(self) -> np.ndarray:
        """(S,) sum over lines per draw."""
        return self.line_totals.sum(axis=1)

    @property
    def draws(self) -> int:
        return int(self.by_accident_year.shape[0])


class AssociationResult(BaseModel):
    """Pearson, Spearman and Kendall coefficients with two-sided p-values."""

    n: int
    pearson: float
    pearson_p: float
    spearman: float
    spearman_p: float
    kendall: float
    kendall_p: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "measure": ["pearson", "spearman", "kendall"],
                "coefficient": [self.pearson, self.spearman, self.kendall],
                "p_value": [self.pearson_p, self.spearman_p, self.kendall_p],
                "n": [self.n] * 3,
            }
        )


class DiagnosticReport(BaseModel):
    """Diagnostic tables for one fitted panel."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    hoerl_summaries: pd.DataFrame
    residual_tables: Dict[str, pd.DataFrame]
    heatmap: pd.DataFrame
    tracking: pd.DataFrame
    fitting_ratios: Optional[pd.DataFrame] = None
    association: Optional[AssociationResult] = None
    association_omit_first: Optional[AssociationResult] = None
    calendar_correlation: Optional[Dict[str, float]] = None


class RunManifest(BaseModel):
    """Everything needed to re-run a command and check its inputs."""

    command: List[str] = Field(..., description="CLI arguments without --out")
    out_dir: str
    config_hash: str
    seeds: Dict[str, int] = Field(default_factory=dict)
    versions: Dict[str, str] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict, description="Path to SHA-256 digest")
    started_at: str
    elapsed_seconds: float


class TruthRecord(BaseModel):
    """Every factor and shock drawn by the simulator."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    gamma: np.ndarray = Field(..., description="(N, I, k) accident-year blocks by accident index")
    psi: np.ndarray = Field(..., description="(N, T) calendar factors h_1 ... h_T")
    gamma_shocks: np.ndarray = Field(..., description="(N, I - 1, k) random-walk increments")
    line_shocks: np.ndarray = Field(..., description="(N, T - 1) line-specific calendar shocks")
    common_shocks: np.ndarray = Field(..., description="(T - 1,) shared calendar shocks")
    extended: bool = False
    line_names: List[str] = Field(default_factory=list)
    holdout: Optional[np.ndarray] = Field(
        None, description="(N, I, I) lower-triangle cells, NaN on the upper triangle"
    )

    @property
    def dim(self) -> int:
        return int(self.gamma.shape[1])

    def factor_frame(self) -> pd.DataFrame:
        """Long table (line, kind, index, factor, value) of every true factor."""
        names = gamma_factor_names(self.extended)
        rows = []
        for n, line in enumerate(self.line_names or range(1, self.gamma.shape[0] + 1)):
            for i in range(self.gamma.shape[1]):
                for k, factor in enumerate(names):
                    rows.append((str(line), "accident", i + 1, factor, self.gamma[n, i, k]))
            for t in range(self.psi.shape[1]):
                rows.append((str(line), "calendar", t + 1, "h", self.psi[n, t]))
        return pd.DataFrame(rows, columns=["line", "kind", "index", "factor", "value"])


class MleReport(BaseModel):
    """Convergence report of a Gaussian maximum-likelihood fit."""

    converged: bool
    iterations: int
    gradient_norm: float = Field(..., description="Finite-difference gradient norm at the result")
    log_likelihood: float
    start_log_likelihood: float
    free_parameters: List[str]
    message: str = ""


class ReserveSummary(BaseModel):
    """Tables describing a reserve distribution."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    summary: pd.DataFrame = Field(..., description="Mean, SD and VaR per line and aggregate")
    by_accident_year: pd.DataFrame = Field(..., description="Mean and SD by accident year and line")
    risk_margins: pd.DataFrame = Field(..., description="VaR, margin and diversification per level")
    density: pd.DataFrame = Field(..., description="Gridded kernel density per line and aggregate")
