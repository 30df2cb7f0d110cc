import numpy as np
import pytest

from app.models.errors import DegeneracyError
from app.models.params import (
    Distribution,
    KalmanConfig,
    ParticleFilterConfig,
    PriorSpec,
)
from app.models.triangle import TrianglePanel
from app.services.kalman_service import DualKalmanFilter, InitialMoments
from app.services.particle_filter_service import (
    ParticleFilter,
    ess,
    normalize,
    systematic_resample,
    weighted_quantile,
)
from app.utils.io import read_json


def _point_prior(params, config, anchor=False):
    n_lines = params.n_lines
    return PriorSpec.from_params(
        params,
        gamma_mean=np.array([init.gamma for init in config.initial]),
        gamma_cov=np.stack([0.01 * np.eye(3)] * n_lines),
        h1_mean=np.zeros(n_lines),
        h1_var=np.full(n_lines, 0.01),
        anchor_h1_to_zero=anchor,
    )


def test_normalize():
    weights = normalize(np.array([0.0, np.log(3.0), -np.inf]))
    np.testing.assert_allclose(weights, [0.25, 0.75, 0.0])
    huge = normalize(np.array([-1e4, -1e4 + np.log(2.0)]))
    np.testing.assert_allclose(huge, [1 / 3, 2 / 3])
    with pytest.raises(DegeneracyError):
        normalize(np.full(3, -np.inf))


def test_ess_bounds():
    assert ess(np.full(50, 0.02)) == pytest.approx(50.0)
    assert ess(np.eye(1, 50)[0]) == pytest.approx(1.0)


def test_systematic_resample_counts(rng):
    weights = np.array([0.5, 0.3, 0.15, 0.05])
    for _ in range(20):
        ancestors = systematic_resample(weights, rng)
        counts = np.bincount(ancestors, minlength=4)
        assert counts.sum() == 4
        assert np.all(counts >= np.floor(4 * weights))
        assert np.all(counts <= np.ceil(4 * weights))


def test_systematic_resample_ignores_zero_weights(rng):
    ancestors = systematic_resample(np.array([0.0, 1.0, 0.0]), rng)
    np.testing.assert_array_equal(ancestors, [1, 1, 1])


def test_weighted_quantile():
    values = np.array([3.0, 1.0, 2.0])
    weights = np.array([0.2, 0.5, 0.3])
    assert weighted_quantile(values, weights, 0.5) == 1.0
    assert weighted_quantile(values, weights, 0.6) == 2.0
    assert weighted_quantile(values, weights, 0.95) == 3.0


def test_run_summaries(gaussian_panel, gaussian_params, gaussian_config):
    config = ParticleFilterConfig(particles=300, xi=0.95, seed=1, block_size=64, workers=1)
    cloud = ParticleFilter(_point_prior(gaussian_params, gaussian_config), config).run(
        gaussian_panel
    )
    assert cloud.step == 6
    assert [summary.step for summary in cloud.history] == list(range(1, 7))
    assert normalize(cloud.log_weights).sum() == pytest.approx(1.0)
    for summary in cloud.history:
        assert 1.0 <= summary.ess <= 300.0 + 1e-9
        assert summary.fitted_current.shape == (2, 7 - summary.step)
    assert cloud.history[0].fitted_previous is None
    assert cloud.history[3].fitted_previous.shape == (2, 3)
    assert cloud.gamma_path.shape == (300, 6, 2, 3)
    np.testing.assert_array_equal(cloud.gamma_path[:, -1], cloud.gamma)


def test_same_seed_any_worker_count(gaussian_panel, gaussian_params, gaussian_config):
    prior = _point_prior(gaussian_params, gaussian_config)
    runs = [
        ParticleFilter(
            prior, ParticleFilterConfig(particles=200, xi=0.9, seed=5, block_size=64, workers=w)
        ).run(gaussian_panel)
        for w in (1, 4)
    ]
    np.testing.assert_array_equal(runs[0].log_weights, runs[1].log_weights)
    np.testing.assert_array_equal(runs[0].psi, runs[1].psi)


def test_static_cloud_keeps_full_sample_size(gaussian_panel, gaussian_params, gaussian_config):
    lines = [
        line.model_copy(update={"sigma2_a": 0.0, "sigma2_r": 0.0, "sigma2_s": 0.0})
        for line in gaussian_params.lines
    ]
    params = gaussian_params.model_copy(update={"lines": lines})
    config = ParticleFilterConfig(particles=250, xi=1.0, seed=2, block_size=100, workers=1)
    cloud = ParticleFilter(_point_prior(params, gaussian_config), config).run(gaussian_panel)
    np.testing.assert_allclose(cloud.log_weights, 0.0, atol=1e-9)
    for summary in cloud.history[1:]:
        assert summary.ess == pytest.approx(250.0)


def test_unit_shrinkage_only_copies_particles(gaussian_panel, gaussian_params, gaussian_config):
    prior = _point_prior(gaussian_params, gaussian_config)
    prior.lines[0].params["phi"] = Distribution(dist="lognormal", mean=-3.0, sd=0.3)
    config = ParticleFilterConfig(particles=200, xi=1.0, seed=3, block_size=64, workers=1)
    pf = ParticleFilter(prior, config)
    initial = pf.initialize(gaussian_panel)
    cloud = pf.run(gaussian_panel)
    assert cloud.theta.shape == (200, 1)
    assert set(cloud.theta[:, 0]) <= set(initial.theta[:, 0])
    initial_psi = {tuple(row) for row in initial.psi.reshape(200, -1)}
    assert all(tuple(row) in initial_psi for row in cloud.psi.reshape(200, -1))


def test_anchored_first_calendar_factor(gaussian_panel, gaussian_params, gaussian_config):
    prior = _point_prior(gaussian_params, gaussian_config, anchor=True)
    config = ParticleFilterConfig(particles=150, xi=0.9, seed=4, workers=1)
    cloud = ParticleFilter(prior, config).run(gaussian_panel)
    np.testing.assert_array_equal(cloud.psi[:, :, 0], 0.0)
    assert not cloud.psi_free[:, 0].any()


def test_masked_row_contributes_nothing(gaussian_panel, gaussian_params, gaussian_config):
    mask = gaussian_panel.mask.copy()
    mask[:, 5, 0] = False
    panel = TrianglePanel(
        values=np.where(mask, gaussian_panel.values, np.nan),
        mask=mask,
        exposures=gaussian_panel.exposures,
    )
    pf = ParticleFilter(
        _point_prior(gaussian_params, gaussian_config),
        ParticleFilterConfig(particles=20, seed=1, workers=1),
    )
    cloud = pf.initialize(panel)
    loglik = pf.row_log_likelihood(cloud.gamma, cloud.psi, cloud.natural, panel, 6)
    np.testing.assert_array_equal(loglik, np.zeros(20))


def test_prior_must_match_panel(gaussian_panel, gaussian_params, gaussian_config):
    prior = _point_prior(gaussian_params, gaussian_config)
    prior.lines.pop()
    with pytest.raises(ValueError):
        ParticleFilter(prior, ParticleFilterConfig(particles=10)).initialize(gaussian_panel)


def test_tweedie_run_on_the_simulated_panel(simulated_panel, config_dir):
    prior = PriorSpec.model_validate(read_json(config_dir / "prior_simulation.json"))
    config = ParticleFilterConfig(particles=400, xi=0.98, seed=8, workers=1)
    cloud = ParticleFilter(prior, config).run(simulated_panel)
    assert len(cloud.history) == 15
    assert np.all(cloud.natural[:, cloud.parameter_names.index("p[1]")] > 1.0)
    assert np.all(cloud.natural[:, cloud.parameter_names.index("p[1]")] < 2.0)
    assert np.isfinite(cloud.history[-1].gamma_mean).all()


@pytest.mark.slow
def test_agrees_with_the_kalman_filter(gaussian_panel, gaussian_params, gaussian_config):
    prior = _point_prior(gaussian_params, gaussian_config)
    config = ParticleFilterConfig(particles=20_000, xi=1.0, seed=6)
    cloud = ParticleFilter(prior, config).run(gaussian_panel)

    kf = DualKalmanFilter(gaussian_params, config=KalmanConfig(artificial_noise=0.0))
    run = kf.run(gaussian_panel, InitialMoments.from_prior(prior))
    kalman_mean = run.final_state.gamma_mean.reshape(2, 3)

    # standard errors from the weighted spread, at the smallest ESS along the run
    weights = normalize(cloud.log_weights)
    blocks = cloud.gamma.reshape(cloud.size, -1)
    particle_mean = weights @ blocks
    variance = weights @ (blocks - particle_mean) ** 2
    sample_size = min([ess(weights)] + [summary.ess for summary in cloud.history])
    standard_error = np.sqrt(variance / sample_size).reshape(2, 3)

    np.testing.assert_allclose(particle_mean.reshape(2, 3), cloud.history[-1].gamma_mean)
    gap = np.abs(particle_mean.reshape(2, 3) - kalman_mean)
    assert np.all(gap < 3.0 * standard_error)
