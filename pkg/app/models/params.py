"""Parameter, factor state and prior models."""

from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import Config

GAMMA_FACTORS: Tuple[str, ...] = ("a", "r", "s", "b1", "b2")


def gamma_factor_names(extended: bool) -> Tuple[str, ...]:
    """Factor names of one accident-year block, in serialization order."""
    return GAMMA_FACTORS if extended else GAMMA_FACTORS[:3]


class ObservationFamily(str, Enum):
    """Observation model: Tweedie with log link or Gaussian with identity link."""

    TWEEDIE = "tweedie"
    GAUSSIAN = "gaussian"


def _check_power(p: float) -> float:
    if not (p == 0.0 or 1.0 <= p <= 2.0):
        raise ValueError(f"unsupported Tweedie power {p}; expected 0 or a value in [1, 2]")
    return p


class TweedieSpec(BaseModel):
    """Power and dispersion of a Tweedie member with variance phi * mu**p."""

    model_config = ConfigDict(frozen=True)

    p: float = Field(..., description="Power parameter, 0 or within [1, 2]")
    phi: float = Field(..., gt=0, description="Dispersion")

    @field_validator("p")
    @classmethod
    def _valid_power(cls, value: float) -> float:
        return _check_power(value)


class LineParams(BaseModel):
    """Static parameters of one line of business."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    sigma2_a: float = Field(..., ge=0, description="Evolution variance of a")
    sigma2_r: float = Field(..., ge=0, description="Evolution variance of r")
    sigma2_s: float = Field(..., ge=0, description="Evolution variance of s")
    sigma2_b1: float = Field(0.0, ge=0, description="Evolution variance of b1")
    sigma2_b2: float = Field(0.0, ge=0, description="Evolution variance of b2")
    sigma2_h: float = Field(..., ge=0, description="Line-specific calendar disturbance variance")
    lam: float = Field(..., alias="lambda", description="Common-shock loading")
    phi: float = Field(..., gt=0, description="Dispersion, or Gaussian observation variance")
    p: float = Field(1.5, description="Tweedie power")

    @field_validator("p")
    @classmethod
    def _valid_power(cls, value: float) -> float:
        return _check_power(value)

    def gamma_variances(self, extended: bool) -> np.ndarray:
        """Random-walk variances of the accident-year block."""
        values = [self.sigma2_a, self.sigma2_r, self.sigma2_s]
        if extended:
            values += [self.sigma2_b1, self.sigma2_b2]
        return np.array(values, dtype=float)


class ModelParams(BaseModel):
    """The static parameter vector for all lines plus the shared common-shock variance."""

    model_config = ConfigDict(frozen=True)

    lines: List[LineParams] = Field(..., min_length=1, description="Per-line parameters")
    sigma2_h_tilde: float = Field(..., ge=0, description="Common-shock variance")
    family: ObservationFamily = Field(
        ObservationFamily.TWEEDIE, description="Observation model shared by all lines"
    )

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def gamma_variances(self, extended: bool) -> np.ndarray:
        """(N, k) array of accident-year random-walk variances."""
        return np.stack([line.gamma_variances(extended) for line in self.lines])

    def line_array(self, name: str) -> np.ndarray:
        """Per-line values of one field, e.g. ``"phi"`` or ``"lam"``."""
        return np.array([getattr(line, name) for line in self.lines], dtype=float)

    def flatten(self, extended: bool) -> Dict[str, float]:
        """Natural-scale values keyed by :func:`parameter_names`."""
        flat: Dict[str, float] = {}
        for n, line in enumerate(self.lines, start=1):
            for field in line_parameter_fields(extended, self.family):
                flat[f"{field}[{n}]"] = float(getattr(line, field))
        flat["sigma2_h_tilde"] = float(self.sigma2_h_tilde)
        return flat

    @classmethod
    def from_flat(
        cls,
        flat: Dict[str, float],
        n_lines: int,
        family: ObservationFamily = ObservationFamily.TWEEDIE,
        defaults: Optional["ModelParams"] = None,
    ) -> "ModelParams":
        """Inverse of :meth:`flatten`; missing entries are taken from ``defaults``."""
        lines = []
        for n in range(1, n_lines + 1):
            base = defaults.lines[n - 1].model_dump() if defaults is not None else {}
            for key, value in flat.items():
                if key.endswith(f"[{n}]"):
                    base[key.split("[")[0]] = float(value)
            if family == ObservationFamily.GAUSSIAN:
                base["p"] = 0.0
            lines.append(LineParams.model_validate(base))
        shared = flat.get(
            "sigma2_h_tilde", defaults.sigma2_h_tilde if defaults is not None else 0.0
        )
        return cls(lines=lines, sigma2_h_tilde=float(shared), family=family)


def line_parameter_fields(extended: bool, family: ObservationFamily) -> Tuple[str, ...]:
    """Per-line parameter fields in serialization order."""
    fields = ["sigma2_a", "sigma2_r", "sigma2_s"]
    if extended:
        fields += ["sigma2_b1", "sigma2_b2"]
    fields += ["sigma2_h", "lam", "phi"]
    if family == ObservationFamily.TWEEDIE:
        fields.append("p")
    return tuple(fields)


def parameter_names(
    n_lines: int, extended: bool, family: ObservationFamily
) -> Tuple[str, ...]:
    """Flat parameter names such as ``sigma2_a[1]``, lines ascending, shared last."""
    names = [
        f"{field}[{n}]"
        for n in range(1, n_lines + 1)
        for field in line_parameter_fields(extended, family)
    ]
    names.append("sigma2_h_tilde")
    return tuple(names)


def to_unconstrained(name: str, value: np.ndarray) -> np.ndarray:
    """Map natural values to the real line: log for variances and phi, logit onto (1, 2) for p."""
    value = np.asarray(value, dtype=float)
    base = name.split("[")[0]
    if base == "lam":
        return value
    if base == "p":
        return np.log(value - 1.0) - np.log(2.0 - value)
    with np.errstate(divide="ignore"):
        return np.log(value)


def from_unconstrained(name: str, value: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_unconstrained`."""
    value = np.asarray(value, dtype=float)
    base = name.split("[")[0]
    if base == "lam":
        return value
    if base == "p":
        return 1.0 + 1.0 / (1.0 + np.exp(-value))
    return np.exp(value)


class FactorState(BaseModel):
    """
    One joint realization of the random factors.

    ``gamma`` is (N, k) with columns (a, r, s[, b1, b2]); ``psi`` is (N, I)
    holding h_1 ... h_I for each line.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    gamma: np.ndarray = Field(..., description="Accident-year factor block per line")
    psi: np.ndarray = Field(..., description="Calendar factors per line")
    extended: bool = Field(False, description="Whether b1 and b2 are present")

    @model_validator(mode="after")
    def _check_blocks(self) -> "FactorState":
        gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
        if gamma.shape[1] != len(gamma_factor_names(self.extended)):
            raise ValueError("gamma block length must be 3 (base) or 5 (extended)")
        if psi.shape[0] != gamma.shape[0]:
            raise ValueError("gamma and psi must cover the same lines")
        self.gamma = gamma
        self.psi = psi
        return self

    @property
    def dim(self) -> int:
        return int(self.psi.shape[1])


class Distribution(BaseModel):
    """A prior for one scalar parameter, expressed on its natural scale."""

    dist: Literal["normal", "lognormal", "uniform", "point"] = Field(
        ..., description="Distribution family"
    )
    mean: Optional[float] = Field(None, description="Normal mean, or mean of log for lognormal")
    sd: Optional[float] = Field(None, ge=0, description="Normal sd, or sd of log for lognormal")
    low: Optional[float] = Field(None, description="Uniform lower bound")
    high: Optional[float] = Field(None, description="Uniform upper bound")
    value: Optional[float] = Field(None, description="Point-mass location")

    @model_validator(mode="after")
    def _check_params(self) -> "Distribution":
        if self.dist in ("normal", "lognormal") and (self.mean is None or self.sd is None):
            raise ValueError(f"{self.dist} prior needs mean and sd")
        if self.dist == "uniform":
            if self.low is None or self.high is None or self.high < self.low:
                raise ValueError("uniform prior needs low <= high")
        if self.dist == "point" and self.value is None:
            raise ValueError("point prior needs value")
        return self

    @property
    def is_point(self) -> bool:
        """True when the prior puts all mass on one value."""
        if self.dist == "point":
            return True
        if self.dist == "uniform":
            return self.low == self.high
        return self.sd == 0

    @property
    def location(self) -> float:
        """A central value of the prior on the natural scale."""
        if self.dist == "point":
            return float(self.value)  # type: ignore[arg-type]
        if self.dist == "uniform":
            return 0.5 * (float(self.low) + float(self.high))  # type: ignore[arg-type]
        if self.dist == "lognormal":
            return float(np.exp(self.mean))  # type: ignore[arg-type]
        return float(self.mean)  # type: ignore[arg-type]

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Sample ``size`` values on the natural scale."""
        if self.is_point:
            return np.full(size, self.location)
        if self.dist == "normal":
            return rng.normal(self.mean, self.sd, size)
        if self.dist == "lognormal":
            return rng.lognormal(self.mean, self.sd, size)
        return rng.uniform(self.low, self.high, size)


class LinePrior(BaseModel):
    """Priors of one line: parameter distributions and initial factor moments."""

    params: Dict[str, Distribution] = Field(
        ..., description="Priors keyed by line field name (sigma2_a, lam, phi, p, ...)"
    )
    gamma_mean: List[float] = Field(..., description="Prior mean of the first accident-year block")
    gamma_cov: List[List[float]] = Field(..., description="Prior covariance of that block")
    h1_mean: float = Field(0.0, description="Prior mean of h_1")
    h1_var: float = Field(0.0, ge=0, description="Prior variance of h_1")

    @model_validator(mode="after")
    def _check_gamma(self) -> "LinePrior":
        k = len(self.gamma_mean)
        if k not in (3, 5):
            raise ValueError("gamma_mean must have 3 or 5 entries")
        cov = np.asarray(self.gamma_cov, dtype=float)
        if cov.shape != (k, k):
            raise ValueError("gamma_cov must be square and match gamma_mean")
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ValueError("gamma_cov must be symmetric positive semidefinite")
        return self


class PriorSpec(BaseModel):
    """Prior specification for the particle filter, one entry per line."""

    lines: List[LinePrior] = Field(..., min_length=1, description="Per-line priors")
    sigma2_h_tilde: Distribution = Field(..., description="Common-shock variance prior")
    family: ObservationFamily = Field(ObservationFamily.TWEEDIE, description="Observation model")
    extended: bool = Field(False, description="Use the five-factor accident-year block")
    anchor_h1_to_zero: bool = Field(False, description="Hold h_1 fixed at zero")

    @model_validator(mode="after")
    def _check_lines(self) -> "PriorSpec":
        k = len(gamma_factor_names(self.extended))
        for n, line in enumerate(self.lines, start=1):
            if len(line.gamma_mean) != k:
                raise ValueError(f"line {n}: gamma_mean length must be {k}")
            for field in line_parameter_fields(self.extended, self.family):
                if field not in line.params:
                    raise ValueError(f"line {n}: missing prior for {field}")
        return self

    @classmethod
    def from_params(
        cls,
        params: ModelParams,
        gamma_mean: np.ndarray,
        gamma_cov: np.ndarray,
        h1_mean: np.ndarray,
        h1_var: np.ndarray,
        extended: bool = False,
        anchor_h1_to_zero: bool = False,
    ) -> "PriorSpec":
        """Point priors at ``params`` with the given initial factor moments."""
        lines = []
        for n, line in enumerate(params.lines):
            lines.append(
                LinePrior(
                    params={
                        field: Distribution(dist="point", value=getattr(line, field))
                        for field in line_parameter_fields(extended, params.family)
                    },
                    gamma_mean=[float(v) for v in gamma_mean[n]],
                    gamma_cov=np.asarray(gamma_cov[n], dtype=float).tolist(),
                    h1_mean=float(h1_mean[n]),
                    h1_var=float(h1_var[n]),
                )
            )
        return cls(
            lines=lines,
            sigma2_h_tilde=Distribution(dist="point", value=params.sigma2_h_tilde),
            family=params.family,
            extended=extended,
            anchor_h1_to_zero=anchor_h1_to_zero,
        )

    def distribution(self, name: str) -> Distribution:
        """Prior of a flat parameter name such as ``phi[2]``."""
        if name == "sigma2_h_tilde":
            return self.sigma2_h_tilde
        field, index = name[:-1].split("[")
        return self.lines[int(index) - 1].params[field]


class InitialFactors(BaseModel):
    """Starting factors of one simulated line."""

    gamma: List[float] = Field(..., description="(a, r, s[, b1, b2]) at accident year 1")
    h1: float = Field(0.0, description="Calendar factor at calendar year 1")


class SimConfig(BaseModel):
    """Configuration of a synthetic panel drawn from the generative model."""

    dim: int = Field(..., ge=2, description="Triangle dimension I")
    params: ModelParams = Field(..., description="True parameters")
    initial: List[InitialFactors] = Field(..., description="Initial factors per line")
    seed: int = Field(0, description="Top-level seed")
    extended: bool = Field(False, description="Use the five-factor accident-year block")
    include_lower: bool = Field(False, description="Also draw the lower triangle for holdout")
    missing_rate: float = Field(0.0, ge=0, lt=1, description="Uniform random mask probability")
    exposures: Optional[List[List[float]]] = Field(None, description="Premiums per line")

    @model_validator(mode="after")
    def _check_lines(self) -> "SimConfig":
        if len(self.initial) != self.params.n_lines:
            raise ValueError("one set of initial factors per line is required")
        k = len(gamma_factor_names(self.extended))
        if any(len(init.gamma) != k for init in self.initial):
            raise ValueError(f"initial gamma blocks must have {k} entries")
        if self.exposures is not None:
            shape = np.asarray(self.exposures, dtype=float).shape
            if shape != (self.params.n_lines, self.dim):
                raise ValueError("exposures must be (lines, dim)")
        return self

    @property
    def n_lines(self) -> int:
        return self.params.n_lines

    @classmethod
    def two_line_default(cls, seed: int = 0, dim: int = 15) -> "SimConfig":
        """Two Tweedie lines with the parameters used for the 15 x 15 simulation study."""
        params = ModelParams(
            lines=[
                LineParams(
                    sigma2_a=0.01, sigma2_r=0.005, sigma2_s=0.001, sigma2_h=0.005,
                    lam=0.6, phi=0.4, p=1.27,
                ),
                LineParams(
                    sigma2_a=0.005, sigma2_r=0.002, sigma2_s=0.0005, sigma2_h=0.005,
                    lam=0.8, phi=0.5, p=1.35,
                ),
            ],
            sigma2_h_tilde=0.005,
        )
        initial = [
            InitialFactors(gamma=[6.9111, 1.2867, -0.8014], h1=0.5),
            InitialFactors(gamma=[7.0908, 2.0212, -0.4343], h1=0.5),
        ]
        return cls(dim=dim, params=params, initial=initial, seed=seed)


class ParticleFilterConfig(BaseModel):
    """Run settings of the particle filter."""

    particles: int = Field(default_factory=lambda: Config.DEFAULT_PARTICLES, ge=1)
    xi: float = Field(
        default_factory=lambda: Config.DEFAULT_XI, gt=0, le=1, description="Shrinkage coefficient"
    )
    seed: int = Field(default_factory=lambda: Config.DEFAULT_SEED)
    block_size: Optional[int] = Field(None, ge=1, description="Particles per random-stream block")
    workers: Optional[int] = Field(None, ge=1, description="Thread count")


class KalmanConfig(BaseModel):
    """Run settings of the dual Kalman filter."""

    artificial_noise: float = Field(
        default_factory=lambda: Config.ARTIFICIAL_NOISE,
        ge=0,
        description="Scalar level of the calendar block's artificial dynamic",
    )
    update_scheme: Literal["dual", "joint"] = Field(
        "joint", description="One stacked update, or interleaved block updates"
    )
    joseph: bool = Field(False, description="Use the Joseph form for covariance updates")
    psi_init: Literal["exact", "simulated"] = Field(
        "exact", description="Closed-form or simulated calendar prior moments"
    )
    init_paths: int = Field(100_000, ge=2, description="Paths for simulated calendar moments")
    seed: int = Field(default_factory=lambda: Config.DEFAULT_SEED)
