"""Shared fixtures for the test suite."""

from pathlib import Path

import logfire
import numpy as np
import pytest

from app.models.params import (
    InitialFactors,
    LineParams,
    ModelParams,
    ObservationFamily,
    SimConfig,
)
from app.models.triangle import IngestConfig, PanelKind
from app.services import simulation_service, triangle_service

# Keep spans and logs local during tests
logfire.configure(send_to_logfire=False, console=False)

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = ROOT / "data"
CONFIG_DIR = ROOT / "configs"

AB_LINES = ["AB (excluding DI)", "AB (DI only)"]


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def config_dir() -> Path:
    return CONFIG_DIR


@pytest.fixture
def ab_panel():
    """The two cumulative AB triangles, differenced into incremental claims."""
    return triangle_service.load_panel(
        [DATA_DIR / "ab_ex_di.csv", DATA_DIR / "ab_di.csv"],
        IngestConfig(kind=PanelKind.CUMULATIVE, line_names=AB_LINES),
    )


@pytest.fixture
def simulated_panel():
    """The two published 15 x 15 simulated incremental triangles."""
    return triangle_service.load_panel(
        [DATA_DIR / "sim_triangle_1.csv", DATA_DIR / "sim_triangle_2.csv"], IngestConfig()
    )


@pytest.fixture
def two_line_config() -> SimConfig:
    return SimConfig.two_line_default(seed=11)


@pytest.fixture
def gaussian_params() -> ModelParams:
    return ModelParams(
        lines=[
            LineParams(
                sigma2_a=0.02, sigma2_r=0.01, sigma2_s=0.005, sigma2_h=0.01,
                lam=0.6, phi=0.05, p=0.0,
            ),
            LineParams(
                sigma2_a=0.03, sigma2_r=0.01, sigma2_s=0.004, sigma2_h=0.02,
                lam=0.8, phi=0.08, p=0.0,
            ),
        ],
        sigma2_h_tilde=0.01,
        family=ObservationFamily.GAUSSIAN,
    )


@pytest.fixture
def gaussian_config(gaussian_params) -> SimConfig:
    """Small two-line Gaussian panel configuration."""
    return SimConfig(
        dim=6,
        params=gaussian_params,
        initial=[
            InitialFactors(gamma=[5.0, 1.2, -0.8], h1=0.0),
            InitialFactors(gamma=[4.0, 1.5, -0.5], h1=0.0),
        ],
        seed=3,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def gaussian_panel(gaussian_config):
    panel, _ = simulation_service.simulate_panel(gaussian_config)
    return panel
