"""End-to-end studies: simulate, explore, fit, forecast and diagnose, with artifacts on disk."""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import logfire
import numpy as np
import pandas as pd
from scipy import stats

from app.models.errors import ArtifactError
from app.models.params import (
    KalmanConfig,
    ModelParams,
    ObservationFamily,
    ParticleFilterConfig,
    PriorSpec,
    SimConfig,
    gamma_factor_names,
    parameter_names,
)
from app.models.results import KalmanRun, ParticleCloud, TruthRecord
from app.models.triangle import TrianglePanel
from app.services import (
    diagnostics_service,
    forecast_service,
    glm_service,
    simulation_service,
    triangle_service,
)
from app.services.kalman_service import DualKalmanFilter, InitialMoments, fit_mle
from app.services.particle_filter_service import ParticleFilter
from app.utils.io import PathLike, read_json, write_csv, write_json

# Configure logger
logger = logfire.with_settings(tags=[__name__])

FIT_FILE = "fit.json"
STATE_FILE = "state.npz"
PANEL_FILE = "panel.json"
TRUTH_FILE = "truth.json"

_Z95 = float(stats.norm.ppf(0.95))


@dataclass
class FitArtifact:
    """A fit read back from its directory."""

    method: str
    panel: TrianglePanel
    extended: bool
    cloud: Optional[ParticleCloud] = None
    params: Optional[ModelParams] = None
    moments: Optional[InitialMoments] = None
    kalman_config: Optional[KalmanConfig] = None
    gamma: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None
    fitted_current: Optional[List[np.ndarray]] = None
    fitted_previous: Optional[List[Optional[np.ndarray]]] = None


def truth_to_json(truth: TruthRecord) -> Dict[str, Any]:
    return truth.model_dump()


def truth_from_json(payload: Dict[str, Any]) -> TruthRecord:
    """Inverse of :func:`truth_to_json`; nulls in the holdout become NaN."""
    arrays = {}
    for key in ("gamma", "psi", "gamma_shocks", "line_shocks", "common_shocks"):
        arrays[key] = np.asarray(payload[key], dtype=float)
    holdout = payload.get("holdout")
    if holdout is not None:
        holdout = np.array(
            [[[np.nan if v is None else v for v in row] for row in line] for line in holdout],
            dtype=float,
        )
    return TruthRecord(
        **arrays,
        extended=bool(payload.get("extended", False)),
        line_names=list(payload.get("line_names", [])),
        holdout=holdout,
    )


def params_from_prior(prior: PriorSpec) -> ModelParams:
    """Gaussian parameters at the prior locations, for Kalman runs without a parameter file."""
    names = parameter_names(len(prior.lines), prior.extended, ObservationFamily.GAUSSIAN)
    flat = {name: prior.distribution(name).location for name in names}
    return ModelParams.from_flat(flat, len(prior.lines), ObservationFamily.GAUSSIAN)


def as_gaussian(params: ModelParams, extended: bool) -> ModelParams:
    """The same parameters under the Gaussian observation model."""
    if params.family == ObservationFamily.GAUSSIAN:
        return params
    return ModelParams.from_flat(
        params.flatten(extended), params.n_lines, ObservationFamily.GAUSSIAN, params
    )


def _padded_rows(rows: Sequence[Optional[np.ndarray]], n_lines: int, dim: int) -> np.ndarray:
    grid = np.full((len(rows), n_lines, dim), np.nan)
    for i, row in enumerate(rows):
        if row is not None:
            grid[i, :, : row.shape[1]] = row
    return grid


def _unpadded_rows(grid: np.ndarray) -> List[Optional[np.ndarray]]:
    dim = grid.shape[2]
    rows: List[Optional[np.ndarray]] = []
    for i in range(grid.shape[0]):
        row = grid[i, :, : dim - i]
        rows.append(None if np.all(np.isnan(row)) else row)
    return rows


def particle_factor_frame(cloud: ParticleCloud, line_names: Sequence[str]) -> pd.DataFrame:
    """Per-step posterior mean, 90% band and Monte Carlo SE of gamma_i and h_1 ... h_i."""
    names = gamma_factor_names(cloud.extended)
    rows = []
    for summary in cloud.history:
        i = summary.step
        for n, line in enumerate(line_names):
            for k, factor in enumerate(names):
                rows.append(
                    {
                        "step": i,
                        "line": line,
                        "factor": factor,
                        "index": i,
                        "mean": summary.gamma_mean[n, k],
                        "q05": summary.gamma_q05[n, k],
                        "q95": summary.gamma_q95[n, k],
                        "se": summary.gamma_se[n, k],
                    }
                )
            for t in range(i):
                rows.append(
                    {
                        "step": i,
                        "line": line,
                        "factor": "h",
                        "index": t + 1,
                        "mean": summary.psi_mean[n, t],
                        "q05": summary.psi_q05[n, t],
                        "q95": summary.psi_q95[n, t],
                        "se": summary.psi_se[n, t],
                    }
                )
    return pd.DataFrame(rows)


def particle_param_frame(cloud: ParticleCloud) -> pd.DataFrame:
    rows = []
    for summary in cloud.history:
        for c, name in enumerate(cloud.parameter_names):
            rows.append(
                {
                    "step": summary.step,
                    "parameter": name,
                    "learned": bool(cloud.free[c]),
                    "mean": summary.param_mean[c],
                    "q05": summary.param_q05[c],
                    "q95": summary.param_q95[c],
                }
            )
    return pd.DataFrame(rows)


def ess_frame(cloud: ParticleCloud) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "step": [s.step for s in cloud.history],
            "ess": [s.ess for s in cloud.history],
            "zero_lookahead": [s.zero_lookahead for s in cloud.history],
            "particles": cloud.size,
        }
    )


def kalman_factor_frame(run: KalmanRun, line_names: Sequence[str]) -> pd.DataFrame:
    """Per-step filtered mean, SD and normal 90% band of gamma_i and h_1 ... h_I."""
    n_lines = len(line_names)
    names = gamma_factor_names(run.extended)
    rows = []

    def add(step: int, line: str, factor: str, index: int, mean: float, sd: float) -> None:
        rows.append(
            {
                "step": step,
                "line": line,
                "factor": factor,
                "index": index,
                "mean": mean,
                "sd": sd,
                "q05": mean - _Z95 * sd,
                "q95": mean + _Z95 * sd,
            }
        )

    for step in run.steps:
        gamma_mean = step.gamma_mean.reshape(n_lines, -1)
        gamma_sd = np.sqrt(np.clip(np.diag(step.gamma_cov), 0, None)).reshape(n_lines, -1)
        psi_mean = step.psi_mean.reshape(n_lines, -1)
        psi_sd = np.sqrt(np.clip(np.diag(step.psi_cov), 0, None)).reshape(n_lines, -1)
        for n, line in enumerate(line_names):
            for k, factor in enumerate(names):
                add(step.step, line, factor, step.step, gamma_mean[n, k], gamma_sd[n, k])
            for t in range(step.step):
                add(step.step, line, "h", t + 1, psi_mean[n, t], psi_sd[n, t])
    return pd.DataFrame(rows)


def loglik_frame(run: KalmanRun) -> pd.DataFrame:
    values = np.array([step.log_likelihood for step in run.steps])
    return pd.DataFrame(
        {
            "step": [step.step for step in run.steps],
            "observed": [int(step.innovation.size) for step in run.steps],
            "log_likelihood": values,
            "cumulative": np.cumsum(values),
        }
    )


def risk_margin_table(statistics: Dict[str, Any], levels: Sequence[float]) -> pd.DataFrame:
    """
    Risk margins and diversification benefit from published reserve statistics.

    Args:
        statistics: ``{"lines": [...], "aggregate": name, "statistics": {name: {mean, sd, var}}}``
        levels: Confidence levels present in every ``var`` mapping
    """
    lines = list(statistics["lines"])
    aggregate = statistics["aggregate"]
    table = statistics["statistics"]
    rows = []
    for level in levels:
        key = f"{level:g}"
        margins = {}
        for name in lines + [aggregate]:
            entry = table[name]
            margins[name] = forecast_service.risk_margin_from_stats(
                entry["mean"], entry["sd"], entry["var"][key]
            )
        benefit = forecast_service.diversification_benefit(
            [margins[name] for name in lines], margins[aggregate]
        )
        for name in lines + [aggregate]:
            entry = table[name]
            rows.append(
                {
                    "level": level,
                    "line": name,
                    "mean": entry["mean"],
                    "sd": entry["sd"],
                    "var": entry["var"][key],
                    "risk_margin": margins[name],
                    "diversification_benefit": benefit if name == aggregate else np.nan,
                }
            )
    return pd.DataFrame(rows)


class PipelineService:
    """Runs one study step and writes its artifacts into ``out_dir``."""

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _write(self, frames: Dict[str, pd.DataFrame]) -> Dict[str, str]:
        written = {}
        for name, frame in frames.items():
            written[name] = str(write_csv(frame, self.out_dir / f"{name}.csv"))
        return written

    # Simulation

    def simulate(self, config: SimConfig) -> Dict[str, str]:
        """Draw a panel and write per-line CSVs, the panel JSON and the truth record."""
        panel, truth = simulation_service.simulate_panel(config)
        written = {
            f"triangle:{path.stem}": str(path)
            for path in triangle_service.write_panel(panel, self.out_dir / "triangles")
        }
        written[PANEL_FILE] = str(
            write_json(triangle_service.panel_to_json(panel), self.out_dir / PANEL_FILE)
        )
        written[TRUTH_FILE] = str(write_json(truth_to_json(truth), self.out_dir / TRUTH_FILE))
        written.update(self._write({"truth_factors": truth.factor_frame()}))
        logger.info("Simulation written", out_dir=str(self.out_dir), files=len(written))
        return written

    # Static GLM exploration

    def explore(
        self,
        panel: TrianglePanel,
        structure: str = "hoerl_extended",
        powers: Optional[Sequence[float]] = None,
        profile: bool = False,
        prior_template: Optional[PriorSpec] = None,
    ) -> Dict[str, str]:
        """
        Static GLM fits per line, residual tables and cross-line association.

        With ``profile`` the Tweedie power of each line is chosen on the
        profile grid first. With a prior template the first accident-year
        block moments of every line are replaced by the GLM hand-off and
        the result is written to ``prior.json``.
        """
        with logfire.span("explore", structure=structure, lines=panel.n_lines):
            frames: Dict[str, pd.DataFrame] = {}
            chosen = list(powers) if powers is not None else [1.5] * panel.n_lines
            if len(chosen) != panel.n_lines:
                raise ValueError("one Tweedie power per line is required")

            if profile:
                profiles = []
                for n, name in enumerate(panel.line_names):
                    i, j, y = panel.observed_cells(n)
                    chosen[n], table = glm_service.profile_power(i, j, y, structure, panel.dim)
                    table.insert(0, "line", name)
                    profiles.append(table)
                frames["power_profile"] = pd.concat(profiles, ignore_index=True)

            fits = glm_service.fit_panel(panel, structure, chosen)
            coefficient_rows = []
            cell_frames = []
            calendar_frames = []
            for name, fit in zip(panel.line_names, fits):
                standard_errors = np.sqrt(np.clip(np.diag(fit.covariance), 0, None))
                for coefficient, value, se in zip(
                    fit.coefficient_names, fit.coefficients, standard_errors
                ):
                    coefficient_rows.append(
                        {
                            "line": name,
                            "coefficient": coefficient,
                            "estimate": value,
                            "std_error": se,
                            "p": fit.p,
                            "dispersion": fit.dispersion_estimate,
                            "deviance": fit.deviance,
                        }
                    )
                cells, calendar = glm_service.pearson_residuals(fit)
                cell_frames.append(cells.assign(line=name))
                calendar_frames.append(calendar.assign(line=name))
            frames["glm_coefficients"] = pd.DataFrame(coefficient_rows)
            frames["cell_residuals"] = pd.concat(cell_frames, ignore_index=True)
            frames["calendar_residuals"] = pd.concat(calendar_frames, ignore_index=True)

            fitted = np.stack([fit.fitted_grid() for fit in fits])
            for dimension, table in diagnostics_service.residuals_by_dimension(
                panel, fitted
            ).items():
                frames[f"residuals_{dimension}"] = table
            frames["development_peaks"] = diagnostics_service.development_peaks(panel)

            if panel.n_lines >= 2:
                x, y = diagnostics_service.paired_cell_residuals(
                    cell_frames[0].drop(columns="line"), cell_frames[1].drop(columns="line")
                )
                frames["association"] = diagnostics_service.association(x, y).to_frame()
                full, reduced = diagnostics_service.calendar_associations(
                    calendar_frames[0].drop(columns="line"),
                    calendar_frames[1].drop(columns="line"),
                )
                frames["calendar_association"] = diagnostics_service.calendar_association_table(
                    full, reduced
                )

            written = self._write(frames)
            if prior_template is not None:
                prior = self._prior_from_fits(prior_template, fits)
                written["prior.json"] = str(
                    write_json(prior.model_dump(mode="json"), self.out_dir / "prior.json")
                )
            logger.info("Exploration written", out_dir=str(self.out_dir), powers=chosen)
            return written

    @staticmethod
    def _prior_from_fits(template: PriorSpec, fits: Sequence[Any]) -> PriorSpec:
        if len(template.lines) != len(fits):
            raise ValueError("prior template and panel have different line counts")
        lines = []
        for line, fit in zip(template.lines, fits):
            mean, covariance = glm_service.gamma_prior_from_fit(fit, line.h1_mean)
            lines.append(
                line.model_copy(
                    update={"gamma_mean": mean.tolist(), "gamma_cov": covariance.tolist()}
                )
            )
        payload = template.model_dump()
        payload["lines"] = [line.model_dump() for line in lines]
        return PriorSpec.model_validate(payload)

    # Filters

    def fit_particles(
        self, panel: TrianglePanel, prior: PriorSpec, config: ParticleFilterConfig
    ) -> ParticleCloud:
        """Run the particle filter and write factors, params, ess and tracking tables."""
        cloud = ParticleFilter(prior, config).run(panel)
        gamma, psi = diagnostics_service.factors_from_history(cloud.history)
        fitted_current = [summary.fitted_current for summary in cloud.history]
        fitted_previous = [summary.fitted_previous for summary in cloud.history]

        self._write(
            {
                "factors": particle_factor_frame(cloud, panel.line_names),
                "params": particle_param_frame(cloud),
                "ess": ess_frame(cloud),
                "tracking": diagnostics_service.tracking_table(
                    panel, fitted_current, fitted_previous
                ),
            }
        )
        np.savez_compressed(
            self.out_dir / STATE_FILE,
            natural=cloud.natural,
            theta=cloud.theta,
            gamma=cloud.gamma,
            gamma_path=cloud.gamma_path,
            psi=cloud.psi,
            psi_free=cloud.psi_free,
            free=cloud.free,
            log_weights=cloud.log_weights,
            gamma_filtered=gamma,
            psi_filtered=psi,
            fitted_current=_padded_rows(fitted_current, panel.n_lines, panel.dim),
            fitted_previous=_padded_rows(fitted_previous, panel.n_lines, panel.dim),
        )
        write_json(
            {
                "method": "particle",
                "extended": cloud.extended,
                "family": cloud.family,
                "step": cloud.step,
                "parameter_names": list(cloud.parameter_names),
                "prior": prior.model_dump(mode="json"),
                "config": config.model_dump(mode="json"),
                "panel": triangle_service.panel_to_json(panel),
            },
            self.out_dir / FIT_FILE,
        )
        logger.info("Particle fit written", out_dir=str(self.out_dir))
        return cloud

    def fit_kalman(
        self,
        panel: TrianglePanel,
        params: ModelParams,
        moments: InitialMoments,
        extended: bool,
        config: KalmanConfig,
        mle: bool = False,
    ) -> KalmanRun:
        """Run the dual Kalman filter, optionally at MLE parameters, and write its tables."""
        params = as_gaussian(params, extended)
        frames: Dict[str, pd.DataFrame] = {}
        report = None
        if mle:
            start = params
            params, report = fit_mle(panel, start, moments, extended, config)
            frames["mle"] = pd.DataFrame(
                {
                    "parameter": list(params.flatten(extended)),
                    "start": list(start.flatten(extended).values()),
                    "estimate": list(params.flatten(extended).values()),
                }
            )

        run = DualKalmanFilter(params, extended, config).run(panel, moments)
        frames["factors"] = kalman_factor_frame(run, panel.line_names)
        frames["params"] = pd.DataFrame(
            {
                "parameter": list(params.flatten(extended)),
                "value": list(params.flatten(extended).values()),
            }
        )
        frames["loglik"] = loglik_frame(run)
        frames["tracking"] = diagnostics_service.tracking_table(
            panel,
            [step.fitted_current for step in run.steps],
            [step.fitted_previous if step.step > 1 else None for step in run.steps],
        )
        self._write(frames)
        write_json(
            {
                "method": "kalman",
                "extended": extended,
                "family": ObservationFamily.GAUSSIAN.value,
                "params": params.model_dump(mode="json", by_alias=True),
                "moments": {
                    "gamma_mean": moments.gamma_mean,
                    "gamma_cov": moments.gamma_cov,
                    "h1_mean": moments.h1_mean,
                    "h1_var": moments.h1_var,
                },
                "config": config.model_dump(mode="json"),
                "mle": report.model_dump(mode="json") if report is not None else None,
                "log_likelihood": run.log_likelihood,
                "panel": triangle_service.panel_to_json(panel),
            },
            self.out_dir / FIT_FILE,
        )
        logger.info(
            "Kalman fit written", out_dir=str(self.out_dir), log_likelihood=run.log_likelihood
        )
        return run

    # Forecast and diagnostics

    def forecast(
        self,
        fit: FitArtifact,
        draws: int,
        levels: Sequence[float],
        seed: int,
        block_size: Optional[int] = None,
        workers: Optional[int] = None,
    ) -> Dict[str, str]:
        """Posterior predictive reserves of a stored fit and their summary tables."""
        with logfire.span("forecast", method=fit.method, draws=draws):
            if fit.method == "particle":
                if fit.cloud is None:
                    raise ArtifactError("particle fit has no stored cloud")
                dist = forecast_service.forecast_particles(
                    fit.cloud, fit.panel, draws, seed, block_size, workers
                )
            else:
                if fit.params is None or fit.moments is None:
                    raise ArtifactError("Kalman fit has no stored parameters or initial moments")
                run = DualKalmanFilter(fit.params, fit.extended, fit.kalman_config).run(
                    fit.panel, fit.moments
                )
                dist = forecast_service.forecast_kalman(
                    run, fit.params, fit.panel, draws, seed, block_size, workers
                )
            summary = forecast_service.summarize(dist, levels)
            written = self._write(
                {
                    "reserves_by_ay": summary.by_accident_year,
                    "summary": summary.summary,
                    "risk_margins": summary.risk_margins,
                    "density": summary.density,
                }
            )
            write_json(dist.provenance, self.out_dir / "provenance.json")
            logger.info(
                "Forecast written",
                out_dir=str(self.out_dir),
                aggregate_mean=float(dist.aggregate.mean()),
            )
            return written

    def diagnose(self, fit: FitArtifact, truth: Optional[TruthRecord] = None) -> Dict[str, str]:
        """Diagnostic tables of a stored fit, with fitting ratios when the truth is known."""
        if fit.gamma is None or fit.psi is None:
            raise ArtifactError("fit has no stored factor estimates")
        if fit.fitted_current is None or fit.fitted_previous is None:
            raise ArtifactError("fit has no stored tracking fits")
        report = diagnostics_service.build_report(
            fit.panel, fit.gamma, fit.psi, fit.fitted_current, fit.fitted_previous, truth
        )
        frames: Dict[str, pd.DataFrame] = {
            "hoerl": report.hoerl_summaries,
            "heatmap": report.heatmap,
            "tracking": report.tracking,
            "tracking_rmse": diagnostics_service.tracking_rmse(report.tracking),
        }
        for dimension, table in report.residual_tables.items():
            frames[f"residuals_{dimension}"] = table
        if report.fitting_ratios is not None:
            frames["fitting_ratios"] = report.fitting_ratios
        if report.association is not None:
            frames["calendar_association"] = diagnostics_service.calendar_association_table(
                report.association, report.association_omit_first
            )
        if report.calendar_correlation is not None:
            correlation = dict(report.calendar_correlation)
            params = self._fitted_params(fit)
            if params is not None and fit.panel.n_lines >= 2:
                try:
                    correlation["theoretical"] = (
                        diagnostics_service.theoretical_increment_correlation(params)
                    )
                except ValueError as e:
                    logger.warn("No theoretical calendar correlation", reason=str(e))
            frames["calendar_correlation"] = pd.DataFrame([correlation])
        return self._write(frames)

    @staticmethod
    def _fitted_params(fit: FitArtifact) -> Optional[ModelParams]:
        if fit.params is not None:
            return fit.params
        if fit.cloud is None:
            return None
        weights = np.exp(fit.cloud.log_weights - np.max(fit.cloud.log_weights))
        weights /= weights.sum()
        means = weights @ fit.cloud.natural
        flat = dict(zip(fit.cloud.parameter_names, means.tolist()))
        return ModelParams.from_flat(
            flat, fit.panel.n_lines, ObservationFamily(fit.cloud.family)
        )

    def risk_margin_study(
        self, statistics_path: PathLike, levels: Sequence[float] = (0.75, 0.95)
    ) -> pd.DataFrame:
        """Risk margins and diversification benefits from a published statistics file."""
        table = risk_margin_table(read_json(statistics_path), levels)
        self._write({"risk_margins": table})
        for level, group in table.groupby("level"):
            logger.info(
                "Diversification benefit",
                level=level,
                percent=float(group["diversification_benefit"].dropna().iloc[0]),
            )
        return table


def load_fit(fit_dir: PathLike) -> FitArtifact:
    """Read a fit written by :meth:`PipelineService.fit_particles` or ``fit_kalman``."""
    fit_dir = Path(fit_dir)
    meta = read_json(fit_dir / FIT_FILE)
    panel = triangle_service.panel_from_json(meta["panel"])
    extended = bool(meta["extended"])

    if meta["method"] == "particle":
        with np.load(fit_dir / STATE_FILE) as state:
            arrays = {key: state[key] for key in state.files}
        cloud = ParticleCloud(
            parameter_names=tuple(meta["parameter_names"]),
            free=arrays["free"],
            natural=arrays["natural"],
            theta=arrays["theta"],
            gamma=arrays["gamma"],
            gamma_path=arrays["gamma_path"],
            psi=arrays["psi"],
            psi_free=arrays["psi_free"],
            log_weights=arrays["log_weights"],
            step=int(meta["step"]),
            extended=extended,
            family=meta["family"],
        )
        return FitArtifact(
            method="particle",
            panel=panel,
            extended=extended,
            cloud=cloud,
            gamma=arrays["gamma_filtered"],
            psi=arrays["psi_filtered"],
            fitted_current=[
                row for row in _unpadded_rows(arrays["fitted_current"]) if row is not None
            ],
            fitted_previous=_unpadded_rows(arrays["fitted_previous"]),
        )

    params = ModelParams.model_validate(meta["params"])
    moments = InitialMoments(
        **{key: np.asarray(value, dtype=float) for key, value in meta["moments"].items()}
    )
    config = KalmanConfig.model_validate(meta["config"])
    run = DualKalmanFilter(params, extended, config).run(panel, moments)
    gamma, psi = diagnostics_service.factors_from_kalman(run, panel.n_lines)
    return FitArtifact(
        method="kalman",
        panel=panel,
        extended=extended,
        params=params,
        moments=moments,
        kalman_config=config,
        gamma=gamma,
        psi=psi,
        fitted_current=[step.fitted_current for step in run.steps],
        fitted_previous=[step.fitted_previous if step.step > 1 else None for step in run.steps],
    )
