import numpy as np
import pandas as pd
import pytest
from scipy import stats

from app.models.results import TruthRecord
from app.services import diagnostics_service
from app.services.kalman_service import DualKalmanFilter, InitialMoments
from app.services.simulation_service import simulate_panel


def _truth(gamma, psi):
    gamma = np.asarray(gamma, dtype=float)
    psi = np.asarray(psi, dtype=float)
    return TruthRecord(
        gamma=gamma,
        psi=psi,
        gamma_shocks=np.zeros((gamma.shape[0], gamma.shape[1] - 1, 3)),
        line_shocks=np.zeros((psi.shape[0], psi.shape[1] - 1)),
        common_shocks=np.zeros(psi.shape[1] - 1),
    )


def test_hoerl_summary():
    mean, variance = diagnostics_service.hoerl_summary(1.2867, -0.8014)
    assert mean == pytest.approx(0.35775, abs=5e-5)
    assert variance == pytest.approx(0.44642, abs=5e-5)
    assert variance == pytest.approx(0.2867 / 0.8014**2, rel=1e-12)
    with pytest.raises(ValueError):
        diagnostics_service.hoerl_summary(1.2, 0.0)
    # increasing curves still report their algebraic values
    assert diagnostics_service.hoerl_summary(2.0, 0.5) == (-2.0, 4.0)


def test_hoerl_table_leaves_flat_curves_blank():
    gamma = np.array([[[6.9, 1.2867, -0.8014], [6.9, 1.1, 0.0]]])
    table = diagnostics_service.hoerl_table(gamma, ["motor"])
    assert table.loc[0, "mean"] == pytest.approx(0.357749, abs=1e-6)
    assert np.isnan(table.loc[1, "mean"])


def test_fitting_ratio_of_the_intercept():
    truth = _truth([[[6.9111, 1.2867, -0.8014], [6.95, 1.3, -0.8]]], [[0.0, 0.5]])
    gamma = np.array([[[6.9772, 1.2867, -0.8014], [6.95, 1.3, -0.8]]])
    ratios = diagnostics_service.fitting_ratios(gamma, np.array([[0.1, 0.6]]), truth, ["motor"])
    row = ratios[(ratios["factor"] == "a") & (ratios["index"] == 1)].iloc[0]
    assert row["ratio"] == pytest.approx(1.00956, abs=1e-5)
    hoerl = ratios[(ratios["factor"] == "hoerl_mean") & (ratios["index"] == 1)].iloc[0]
    assert hoerl["ratio"] == pytest.approx(1.0)
    h = ratios[ratios["factor"] == "h"].set_index("index")
    assert np.isnan(h.loc[1, "ratio"])
    assert h.loc[2, "ratio"] == pytest.approx(1.2)


def test_association_matches_scipy(rng):
    x = rng.normal(size=30)
    y = 0.5 * x + rng.normal(size=30)
    result = diagnostics_service.association(x, y)
    assert result.n == 30
    assert result.pearson == pytest.approx(stats.pearsonr(x, y)[0])
    assert result.spearman_p == pytest.approx(stats.spearmanr(x, y)[1])
    assert result.kendall == pytest.approx(stats.kendalltau(x, y)[0])
    frame = result.to_frame()
    assert list(frame["measure"]) == ["pearson", "spearman", "kendall"]


def test_association_edge_cases():
    with pytest.raises(ValueError, match="at least 3"):
        diagnostics_service.association(np.array([1.0, 2.0]), np.array([2.0, 1.0]))
    with pytest.raises(ValueError, match="constant"):
        diagnostics_service.association(np.ones(5), np.arange(5.0))
    monotone = diagnostics_service.association(np.arange(6.0), np.exp(np.arange(6.0)))
    assert monotone.spearman == pytest.approx(1.0)
    assert monotone.kendall == pytest.approx(1.0)


def test_calendar_residual_correlation_uses_every_year():
    first = pd.DataFrame({"t": [1, 2, 3, 4, 5], "residual": [9.0, 0.1, 0.2, 0.3, 0.5]})
    second = pd.DataFrame({"t": [1, 2, 3, 4, 5], "residual": [-9.0, 1.0, 2.0, 3.0, 5.0]})
    full = diagnostics_service.calendar_residual_correlation(first, second)
    assert full.n == 5
    assert full.pearson < 0
    reduced = diagnostics_service.calendar_residual_correlation(first, second, omit_first=True)
    assert reduced.n == 4
    assert reduced.pearson == pytest.approx(1.0)

    table = diagnostics_service.calendar_association_table(
        *diagnostics_service.calendar_associations(first, second)
    )
    assert list(table["calendar_years"]) == ["all"] * 3 + ["omit_first"] * 3
    pearson = table[table["measure"] == "pearson"].set_index("calendar_years")
    assert pearson.loc["all", "coefficient"] == pytest.approx(full.pearson)
    assert pearson.loc["omit_first", "n"] == 4


def test_calendar_association_without_enough_later_years():
    first = pd.DataFrame({"t": [1, 2, 3], "residual": [1.0, 0.5, -0.2]})
    second = pd.DataFrame({"t": [1, 2, 3], "residual": [0.8, 0.1, -0.4]})
    full, reduced = diagnostics_service.calendar_associations(first, second)
    assert full.n == 3
    assert reduced is None
    assert len(diagnostics_service.calendar_association_table(full, reduced)) == 3


def test_paired_cell_residuals():
    first = pd.DataFrame({"i": [1, 1, 2], "j": [1, 2, 1], "residual": [0.1, 0.2, 0.3]})
    second = pd.DataFrame({"i": [1, 2], "j": [2, 1], "residual": [1.0, 2.0]})
    x, y = diagnostics_service.paired_cell_residuals(first, second)
    np.testing.assert_allclose(x, [0.2, 0.3])
    np.testing.assert_allclose(y, [1.0, 2.0])


def test_calendar_correlation_interval():
    h_1 = np.array([0.0, 0.1, 0.3, 0.2, 0.5, 0.4, 0.7])
    h_2 = np.array([0.0, 0.2, 0.1, 0.4, 0.3, 0.6, 0.5])
    result = diagnostics_service.calendar_correlation(h_1, h_2)
    r = stats.pearsonr(h_1, h_2)[0]
    half = stats.norm.ppf(0.975) / np.sqrt(7 - 3)
    assert result["n"] == 7
    assert result["correlation"] == pytest.approx(r)
    assert result["ci_low"] == pytest.approx(np.tanh(np.arctanh(r) - half))
    assert result["ci_high"] == pytest.approx(np.tanh(np.arctanh(r) + half))
    skipped = diagnostics_service.calendar_correlation(h_1, h_2, skip_first=True)
    assert skipped["n"] == 6
    with pytest.raises(ValueError):
        diagnostics_service.calendar_correlation(h_1[:3], h_2[:3])


def test_theoretical_increment_correlation(gaussian_params):
    expected = 0.6 * 0.8 * 0.01 / np.sqrt((0.01 + 0.36 * 0.01) * (0.02 + 0.64 * 0.01))
    value = diagnostics_service.theoretical_increment_correlation(gaussian_params)
    assert value == pytest.approx(expected)
    assert value == pytest.approx(0.25332, abs=1e-5)


def test_perfect_fit_has_zero_residuals(ab_panel):
    fitted = np.where(ab_panel.mask, ab_panel.values, np.nan)
    tables = diagnostics_service.residuals_by_dimension(ab_panel, fitted)
    assert set(tables) == {"accident", "development", "calendar"}
    for table in tables.values():
        np.testing.assert_allclose(table["residual"], 0.0, atol=1e-12)
    assert len(tables["calendar"]) == 2 * 10

    heatmap = diagnostics_service.heatmap_table(ab_panel, fitted)
    assert len(heatmap) == 2 * 55
    np.testing.assert_allclose(heatmap["ratio"], 1.0)


def test_tracking_rmse():
    tracking = pd.DataFrame(
        {
            "line": ["motor"] * 3,
            "i": [1, 1, 2],
            "j": [1, 2, 1],
            "observed": [1.0, 2.0, np.nan],
            "fitted_current": [1.0, 4.0, 3.0],
            "fitted_previous": [2.0, 3.0, 3.0],
        }
    )
    table = diagnostics_service.tracking_rmse(tracking)
    assert len(table) == 1
    assert table.loc[0, "rmse_current"] == pytest.approx(np.sqrt(2.0))
    assert table.loc[0, "rmse_previous"] == pytest.approx(1.0)


def test_development_peaks(ab_panel):
    peaks = diagnostics_service.development_peaks(ab_panel)
    first = peaks[(peaks["line"] == ab_panel.line_names[0]) & (peaks["i"] == 1)]
    assert list(first["j"]) == [1, 2]
    assert list(first["value"]) == [13714.0, 24996.0 - 13714.0]
    last = peaks[(peaks["line"] == ab_panel.line_names[0]) & (peaks["i"] == 10)]
    assert len(last) == 1


def test_build_report_from_a_kalman_run(gaussian_config):
    panel, truth = simulate_panel(gaussian_config)
    moments = InitialMoments(
        gamma_mean=np.array([init.gamma for init in gaussian_config.initial]),
        gamma_cov=np.stack([0.01 * np.eye(3)] * 2),
        h1_mean=np.zeros(2),
        h1_var=np.full(2, 0.01),
    )
    run = DualKalmanFilter(gaussian_config.params).run(panel, moments)
    gamma, psi = diagnostics_service.factors_from_kalman(run, 2)
    assert gamma.shape == (2, 6, 3)
    assert psi.shape == (2, 6)

    report = diagnostics_service.build_report(
        panel,
        gamma,
        psi,
        [step.fitted_current for step in run.steps],
        [None] + [step.fitted_previous for step in run.steps[1:]],
        truth=truth,
    )
    assert len(report.tracking) == 2 * 21
    assert report.tracking.loc[report.tracking["i"] == 1, "fitted_previous"].isna().all()
    assert set(report.fitting_ratios["factor"]) >= {"a", "r", "s", "h", "hoerl_mean"}
    assert report.calendar_correlation is not None
    assert -1.0 <= report.calendar_correlation["correlation"] <= 1.0
    assert len(report.hoerl_summaries) == 12
