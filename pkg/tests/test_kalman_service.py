import numpy as np
import pytest
from scipy import stats

from app.models.params import (
    InitialFactors,
    KalmanConfig,
    LineParams,
    ModelParams,
    ObservationFamily,
    SimConfig,
)
from app.models.results import KalmanState
from app.models.triangle import TrianglePanel
from app.services import simulation_service, state_space_service
from app.services.kalman_service import (
    DualKalmanFilter,
    InitialMoments,
    fit_mle,
    mle_parameter_names,
)


@pytest.fixture
def moments():
    return InitialMoments(
        gamma_mean=np.array([[5.0, 1.2, -0.8], [4.0, 1.5, -0.5]]),
        gamma_cov=np.stack([np.diag([0.05, 0.01, 0.005])] * 2),
        h1_mean=np.array([0.0, 0.1]),
        h1_var=np.array([0.01, 0.02]),
    )


def _with_hidden_cells(panel, cells):
    mask = panel.mask.copy()
    for line, i, j in cells:
        mask[line, i, j] = False
    return TrianglePanel(
        values=np.where(mask, panel.values, np.nan), mask=mask, exposures=panel.exposures
    )


def _dense_posterior(panel, params, moments, upto=None):
    """
    Condition the full joint Gaussian of every factor on the observed cells of rows 1..upto.

    The state stacks gamma_1 ... gamma_I for each line, then h_1 ... h_I for each line.
    """
    n_lines, dim, k = panel.n_lines, panel.dim, 3
    variances = params.gamma_variances(False)
    gamma_size = n_lines * dim * k
    size = gamma_size + n_lines * dim

    mean = np.zeros(size)
    cov = np.zeros((size, size))
    rows = np.arange(1, dim + 1)
    steps = np.minimum.outer(rows, rows) - 1.0
    for n in range(n_lines):
        block = slice(n * dim * k, (n + 1) * dim * k)
        mean[block] = np.tile(moments.gamma_mean[n], dim)
        cov[block, block] = np.kron(np.ones((dim, dim)), moments.gamma_cov[n]) + np.kron(
            steps, np.diag(variances[n])
        )
    psi_mean, psi_cov = state_space_service.psi_moments_exact(
        params, dim, moments.h1_mean, moments.h1_var
    )
    mean[gamma_size:] = psi_mean
    cov[gamma_size:, gamma_size:] = psi_cov

    design, y, noise = [], [], []
    phi = params.line_array("phi")
    for n in range(n_lines):
        for i in range(1, (upto or dim) + 1):
            A = state_space_service.design_matrix_A(i, dim)
            for j in range(1, dim - i + 2):
                if not panel.mask[n, i - 1, j - 1]:
                    continue
                row = np.zeros(size)
                start = n * dim * k + (i - 1) * k
                row[start : start + k] = A[j - 1]
                row[gamma_size + n * dim + i + j - 2] = 1.0
                design.append(row)
                y.append(panel.values[n, i - 1, j - 1])
                noise.append(phi[n])
    B = np.array(design)
    y = np.array(y)
    observed_cov = B @ cov @ B.T + np.diag(noise)
    loglik = stats.multivariate_normal(B @ mean, observed_cov).logpdf(y)
    gain = np.linalg.solve(observed_cov, B @ cov).T
    post_mean = mean + gain @ (y - B @ mean)
    post_cov = cov - gain @ B @ cov

    current = (upto or dim) - 1
    last = [n * dim * k + current * k + c for n in range(n_lines) for c in range(k)]
    return {
        "loglik": float(loglik),
        "gamma_mean": post_mean[last],
        "gamma_cov": post_cov[np.ix_(last, last)],
        "psi_mean": post_mean[gamma_size:],
        "psi_cov": post_cov[gamma_size:, gamma_size:],
    }


@pytest.mark.parametrize("hidden", [[], [(0, 1, 2), (1, 0, 0), (1, 5, 0)]])
def test_joint_scheme_matches_dense_conditioning(gaussian_panel, gaussian_params, moments, hidden):
    panel = _with_hidden_cells(gaussian_panel, hidden)
    config = KalmanConfig(artificial_noise=0.0)
    run = DualKalmanFilter(gaussian_params, config=config).run(panel, moments)
    assert run.update_scheme == "joint"

    loglik = 0.0
    for step in run.steps:
        oracle = _dense_posterior(panel, gaussian_params, moments, upto=step.step)
        loglik += step.log_likelihood
        assert loglik == pytest.approx(oracle["loglik"], rel=1e-8)
        np.testing.assert_allclose(step.gamma_mean, oracle["gamma_mean"], atol=1e-8)
        np.testing.assert_allclose(step.gamma_cov, oracle["gamma_cov"], atol=1e-9)
        np.testing.assert_allclose(step.psi_mean, oracle["psi_mean"], atol=1e-8)
        np.testing.assert_allclose(step.psi_cov, oracle["psi_cov"], atol=1e-9)

    final = _dense_posterior(panel, gaussian_params, moments)
    np.testing.assert_allclose(run.final_state.gamma_mean, final["gamma_mean"], atol=1e-8)
    assert DualKalmanFilter(gaussian_params, config=config).log_likelihood(
        panel, moments
    ) == pytest.approx(final["loglik"], rel=1e-8)


def test_dual_scheme_ignores_the_cross_covariance(gaussian_panel, gaussian_params, moments):
    config = KalmanConfig(update_scheme="dual", artificial_noise=0.0)
    dual = DualKalmanFilter(gaussian_params, config=config).log_likelihood(gaussian_panel, moments)
    exact = _dense_posterior(gaussian_panel, gaussian_params, moments)["loglik"]
    assert np.isfinite(dual)
    assert dual != pytest.approx(exact, rel=1e-6)


@pytest.mark.parametrize("scheme", ["dual", "joint"])
def test_joseph_form_agrees(gaussian_panel, gaussian_params, moments, scheme):
    runs = [
        DualKalmanFilter(
            gaussian_params, config=KalmanConfig(joseph=joseph, update_scheme=scheme)
        ).run(gaussian_panel, moments)
        for joseph in (False, True)
    ]
    assert runs[0].log_likelihood == pytest.approx(runs[1].log_likelihood, rel=1e-7)
    np.testing.assert_allclose(
        runs[0].final_state.gamma_mean, runs[1].final_state.gamma_mean, atol=1e-7
    )
    np.testing.assert_allclose(runs[0].final_state.psi_cov, runs[1].final_state.psi_cov, atol=1e-8)


def test_dual_scheme_steps(gaussian_panel, gaussian_params, moments):
    config = KalmanConfig(update_scheme="dual")
    run = DualKalmanFilter(gaussian_params, config=config).run(gaussian_panel, moments)
    assert run.update_scheme == "dual"
    assert [step.step for step in run.steps] == list(range(1, 7))
    assert run.final_state.cross_cov is None
    assert np.isfinite(run.log_likelihood)
    for step in run.steps:
        assert step.fitted_current.shape == (2, 7 - step.step)
        assert np.linalg.eigvalsh(step.psi_cov).min() > -1e-10
        assert np.linalg.eigvalsh(step.gamma_cov).min() > -1e-10


def test_first_prediction_uses_the_prior(gaussian_panel, gaussian_params, moments):
    run = DualKalmanFilter(gaussian_params).run(gaussian_panel, moments)
    j = np.arange(1.0, 7.0)
    expected = (
        moments.gamma_mean[:, [0]]
        + moments.gamma_mean[:, [1]] * np.log(j)
        + moments.gamma_mean[:, [2]] * j
        + moments.h1_mean[:, None]
    )
    np.testing.assert_allclose(run.steps[0].fitted_previous, expected)


def test_artificial_noise_only_widens_the_calendar_block(gaussian_params, moments):
    kf = DualKalmanFilter(gaussian_params, config=KalmanConfig(artificial_noise=0.1))
    state = kf.init(moments, 6)
    predicted = kf.predict(state)
    np.testing.assert_allclose(
        np.diag(predicted.psi_cov - state.psi_cov), state.artificial_noise
    )
    assert state.artificial_noise == pytest.approx(0.1 * np.diag(state.psi_cov).mean())
    q = np.diag(gaussian_params.gamma_variances(False).reshape(-1))
    np.testing.assert_allclose(predicted.gamma_cov - state.gamma_cov, q)
    assert predicted.step == 2


def test_simulated_calendar_moments(gaussian_params, moments):
    exact = DualKalmanFilter(gaussian_params).init(moments, 6)
    config = KalmanConfig(psi_init="simulated", init_paths=200_000, seed=4)
    simulated = DualKalmanFilter(gaussian_params, config=config).init(moments, 6)
    np.testing.assert_allclose(simulated.psi_mean, exact.psi_mean, atol=5e-3)
    np.testing.assert_allclose(simulated.psi_cov, exact.psi_cov, atol=5e-3)


def test_rejects_tweedie_parameters(two_line_config):
    with pytest.raises(ValueError, match="Gaussian"):
        DualKalmanFilter(two_line_config.params)


def test_rejects_invalid_moments(gaussian_params, moments):
    kf = DualKalmanFilter(gaussian_params)
    bad_cov = InitialMoments(
        gamma_mean=moments.gamma_mean,
        gamma_cov=np.stack([-np.eye(3)] * 2),
        h1_mean=moments.h1_mean,
        h1_var=moments.h1_var,
    )
    with pytest.raises(ValueError, match="positive semidefinite"):
        kf.init(bad_cov, 6)
    bad_var = InitialMoments(
        gamma_mean=moments.gamma_mean,
        gamma_cov=moments.gamma_cov,
        h1_mean=moments.h1_mean,
        h1_var=np.array([-0.1, 0.0]),
    )
    with pytest.raises(ValueError):
        kf.init(bad_var, 6)


def test_mle_parameter_names(gaussian_params):
    names = mle_parameter_names(gaussian_params, False, None)
    assert "sigma2_h_tilde" in names
    assert "lam[2]" in names
    zero_r = gaussian_params.lines[0].model_copy(update={"sigma2_r": 0.0})
    params = gaussian_params.model_copy(update={"lines": [zero_r, gaussian_params.lines[1]]})
    assert "sigma2_r[1]" not in mle_parameter_names(params, False, None)
    with pytest.raises(ValueError, match="unknown"):
        mle_parameter_names(gaussian_params, False, ["sigma2_q[1]"])


def test_mle_never_worse_than_the_start(gaussian_panel, gaussian_params, moments):
    start_lines = [line.model_copy(update={"phi": 0.5}) for line in gaussian_params.lines]
    start = gaussian_params.model_copy(update={"lines": start_lines})
    estimate, report = fit_mle(
        gaussian_panel, start, moments, free=["phi[1]", "phi[2]"], max_iter=50
    )
    assert report.free_parameters == ["phi[1]", "phi[2]"]
    assert report.log_likelihood >= report.start_log_likelihood
    assert estimate.lines[0].sigma2_a == start.lines[0].sigma2_a
    refit = DualKalmanFilter(estimate).log_likelihood(gaussian_panel, moments)
    assert refit == pytest.approx(report.log_likelihood, rel=1e-9)


def test_mle_rejects_an_infeasible_start(gaussian_panel, gaussian_params, moments):
    singular = InitialMoments(
        gamma_mean=moments.gamma_mean,
        gamma_cov=np.stack([-np.eye(3)] * 2),
        h1_mean=moments.h1_mean,
        h1_var=moments.h1_var,
    )
    with pytest.raises(ValueError, match="start point"):
        fit_mle(gaussian_panel, gaussian_params, singular, free=["phi[1]"], max_iter=5)


def _scalar_state(gamma_var, psi_var):
    return KalmanState(
        psi_mean=np.array([0.3]),
        psi_cov=np.array([[psi_var]]),
        gamma_mean=np.array([0.2]),
        gamma_cov=np.array([[gamma_var]]),
    )


@pytest.mark.parametrize("joseph", [False, True])
def test_scalar_calendar_update(gaussian_params, joseph):
    kf = DualKalmanFilter(gaussian_params, config=KalmanConfig(joseph=joseph))
    state = _scalar_state(gamma_var=0.0, psi_var=1.0)
    posterior = kf.update_calendar(state, np.array([1.3]), np.zeros((1, 1)), np.eye(1), np.eye(1))
    assert posterior.psi_mean[0] == pytest.approx(0.8)
    assert posterior.psi_cov[0, 0] == pytest.approx(0.5)
    np.testing.assert_array_equal(posterior.gamma_mean, state.gamma_mean)

    vague = kf.update_calendar(
        state, np.array([1.3]), np.zeros((1, 1)), np.eye(1), 1e12 * np.eye(1)
    )
    assert vague.psi_mean[0] == pytest.approx(0.3, abs=1e-10)
    assert vague.psi_cov[0, 0] == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("joseph", [False, True])
def test_scalar_gamma_update(gaussian_params, joseph):
    kf = DualKalmanFilter(gaussian_params, config=KalmanConfig(joseph=joseph))
    state = _scalar_state(gamma_var=1.0, psi_var=0.0)
    posterior = kf.update_gamma(state, np.array([1.5]), np.eye(1), np.eye(1), np.eye(1))
    assert posterior.gamma_mean[0] == pytest.approx(0.7)
    assert posterior.gamma_cov[0, 0] == pytest.approx(0.5)
    np.testing.assert_array_equal(posterior.psi_mean, state.psi_mean)

    vague = kf.update_gamma(state, np.array([1.5]), np.eye(1), np.eye(1), 1e12 * np.eye(1))
    assert vague.gamma_mean[0] == pytest.approx(0.2, abs=1e-10)
    assert vague.gamma_cov[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_single_line_two_step_filter_by_hand():
    params = ModelParams(
        lines=[
            LineParams(
                sigma2_a=0.02, sigma2_r=0.01, sigma2_s=0.005, sigma2_h=0.01,
                lam=0.6, phi=0.05, p=0.0,
            )
        ],
        sigma2_h_tilde=0.01,
        family=ObservationFamily.GAUSSIAN,
    )
    moments = InitialMoments(
        gamma_mean=np.array([[5.0, 1.2, -0.8]]),
        gamma_cov=np.diag([0.05, 0.01, 0.005])[None],
        h1_mean=np.array([0.1]),
        h1_var=np.array([0.02]),
    )
    values = np.array([[[5.3, 5.6], [5.2, np.nan]]])
    panel = TrianglePanel(values=values, mask=np.isfinite(values), exposures=np.ones((1, 2)))
    config = KalmanConfig(update_scheme="dual", artificial_noise=0.0)
    run = DualKalmanFilter(params, config=config).run(panel, moments)

    gamma = np.array([5.0, 1.2, -0.8])
    P_gamma = np.diag([0.05, 0.01, 0.005])
    psi = np.array([0.1, 0.1])
    # Var(h_2) = Var(h_1) + sigma2_h + lambda^2 sigma2_h~
    P_psi = np.array([[0.02, 0.02], [0.02, 0.0336]])
    rows = [
        (np.array([[1.0, 0.0, 1.0], [1.0, np.log(2.0), 2.0]]), np.eye(2), np.array([5.3, 5.6])),
        (np.array([[1.0, 0.0, 1.0]]), np.array([[0.0, 1.0]]), np.array([5.2])),
    ]
    for step, (A, E, y) in zip(run.steps, rows):
        if step.step > 1:
            P_gamma = P_gamma + np.diag([0.02, 0.01, 0.005])
        H = 0.05 * np.eye(y.size)
        F = A @ P_gamma @ A.T + E @ P_psi @ E.T + H
        loglik = stats.multivariate_normal(A @ gamma + E @ psi, F).logpdf(y)

        G_psi = P_psi @ E.T @ np.linalg.inv(E @ P_psi @ E.T + H)
        psi, P_psi = psi + G_psi @ (y - A @ gamma - E @ psi), P_psi - G_psi @ E @ P_psi
        G_gamma = P_gamma @ A.T @ np.linalg.inv(A @ P_gamma @ A.T + H)
        gamma, P_gamma = (
            gamma + G_gamma @ (y - A @ gamma - E @ psi),
            P_gamma - G_gamma @ A @ P_gamma,
        )

        assert step.log_likelihood == pytest.approx(loglik, abs=1e-10)
        np.testing.assert_allclose(step.psi_mean, psi, atol=1e-10)
        np.testing.assert_allclose(step.psi_cov, P_psi, atol=1e-10)
        np.testing.assert_allclose(step.gamma_mean, gamma, atol=1e-10)
        np.testing.assert_allclose(step.gamma_cov, P_gamma, atol=1e-10)


def _reversed_lines(panel, params, moments):
    panel = TrianglePanel(
        values=np.ascontiguousarray(panel.values[::-1]),
        mask=np.ascontiguousarray(panel.mask[::-1]),
        exposures=np.ascontiguousarray(panel.exposures[::-1]),
    )
    params = params.model_copy(update={"lines": params.lines[::-1]})
    moments = InitialMoments(
        gamma_mean=moments.gamma_mean[::-1].copy(),
        gamma_cov=moments.gamma_cov[::-1].copy(),
        h1_mean=moments.h1_mean[::-1].copy(),
        h1_var=moments.h1_var[::-1].copy(),
    )
    return panel, params, moments


@pytest.mark.parametrize("scheme", ["dual", "joint"])
def test_line_order_does_not_matter(gaussian_panel, gaussian_params, moments, scheme):
    config = KalmanConfig(update_scheme=scheme)
    forward = DualKalmanFilter(gaussian_params, config=config).run(gaussian_panel, moments)
    panel, params, flipped = _reversed_lines(gaussian_panel, gaussian_params, moments)
    backward = DualKalmanFilter(params, config=config).run(panel, flipped)

    assert backward.log_likelihood == pytest.approx(forward.log_likelihood, rel=1e-10)
    np.testing.assert_allclose(
        backward.final_state.gamma_mean.reshape(2, 3)[::-1],
        forward.final_state.gamma_mean.reshape(2, 3),
        atol=1e-10,
    )
    np.testing.assert_allclose(
        backward.final_state.psi_mean.reshape(2, -1)[::-1],
        forward.final_state.psi_mean.reshape(2, -1),
        atol=1e-10,
    )
    for back, ahead in zip(backward.steps, forward.steps):
        np.testing.assert_allclose(back.fitted_current[::-1], ahead.fitted_current, atol=1e-10)


@pytest.mark.parametrize("scheme", ["dual", "joint"])
def test_level_trade_off_leaves_the_likelihood_unchanged(
    gaussian_panel, gaussian_params, moments, scheme
):
    gamma_mean = moments.gamma_mean.copy()
    gamma_mean[:, 0] -= 0.7
    shifted = InitialMoments(
        gamma_mean=gamma_mean,
        gamma_cov=moments.gamma_cov,
        h1_mean=moments.h1_mean + 0.7,
        h1_var=moments.h1_var,
    )
    kf = DualKalmanFilter(gaussian_params, config=KalmanConfig(update_scheme=scheme))
    assert kf.log_likelihood(gaussian_panel, shifted) == pytest.approx(
        kf.log_likelihood(gaussian_panel, moments), rel=1e-10
    )


def test_mle_of_the_observation_variance_with_known_states(
    gaussian_panel, gaussian_params, moments
):
    static = {"sigma2_a": 0.0, "sigma2_r": 0.0, "sigma2_s": 0.0, "sigma2_h": 0.0, "phi": 0.5}
    lines = [line.model_copy(update=static) for line in gaussian_params.lines]
    params = gaussian_params.model_copy(update={"lines": lines, "sigma2_h_tilde": 0.0})
    known = InitialMoments(
        gamma_mean=moments.gamma_mean,
        gamma_cov=np.zeros((2, 3, 3)),
        h1_mean=moments.h1_mean,
        h1_var=np.zeros(2),
    )
    estimate, _ = fit_mle(
        gaussian_panel,
        params,
        known,
        config=KalmanConfig(artificial_noise=0.0),
        free=["phi[1]", "phi[2]"],
    )

    dim = gaussian_panel.dim
    for n in range(2):
        squared = []
        for i in range(1, dim + 1):
            mean = state_space_service.design_matrix_A(i, dim) @ moments.gamma_mean[n]
            row = gaussian_panel.values[n, i - 1, : dim - i + 1]
            squared.extend((row - mean - moments.h1_mean[n]) ** 2)
        assert estimate.lines[n].phi == pytest.approx(np.mean(squared), rel=1e-3)


# Median observation-variance estimates over repeated 10 x 10 panels stay within this band
RECOVERY_BAND = 0.25


@pytest.mark.slow
def test_observation_variances_are_recovered(gaussian_params):
    initial = [
        InitialFactors(gamma=[5.0, 1.2, -0.8], h1=0.0),
        InitialFactors(gamma=[4.0, 1.5, -0.5], h1=0.0),
    ]
    moments = InitialMoments(
        gamma_mean=np.array([factors.gamma for factors in initial]),
        gamma_cov=np.stack([0.01 * np.eye(3)] * 2),
        h1_mean=np.zeros(2),
        h1_var=np.full(2, 0.01),
    )
    estimates = []
    for seed in range(50):
        config = SimConfig(dim=10, params=gaussian_params, initial=initial, seed=seed)
        panel, _ = simulation_service.simulate_panel(config)
        estimate, _ = fit_mle(panel, gaussian_params, moments, free=["phi[1]", "phi[2]"])
        estimates.append(estimate.line_array("phi"))

    medians = np.median(np.array(estimates), axis=0)
    truth = gaussian_params.line_array("phi")
    np.testing.assert_allclose(medians / truth, 1.0, atol=RECOVERY_BAND)
