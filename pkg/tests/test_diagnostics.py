import math

import numpy as np
import pytest
from scipy import stats

from delaypanel import diagnostics as diag
from delaypanel import estimators as est
approx = pytest.approx


def iv_problem(rng, n=400, l_excluded=2, pi=0.7, rho=0.5, k_exog=0,
               contaminate=0.0, bandwidth=0):
    """IV DGP with optional instrument-invalidity contamination."""
    z = rng.standard_normal((n, l_excluded))
    exog = rng.standard_normal((n, k_exog))
    v = rng.standard_normal(n)
    u = rho * v + math.sqrt(1 - rho ** 2) * rng.standard_normal(n)
    x = z @ np.full(l_excluded, pi / math.sqrt(max(l_excluded, 1))) + v
    y = x + exog.sum(axis=1) * 0.5 + u
    z_obs = z.copy()
    if contaminate:
        z_obs[:, -1] = z[:, -1] + contaminate * u
    x_names = ["x_endog"] + [f"w{j}" for j in range(k_exog)]
    return est.EstimationProblem(
        y=y, X=np.column_stack([x, exog]), Z=np.column_stack([z_obs, exog]),
        x_names=x_names,
        z_names=[f"z{j}" for j in range(l_excluded)] + x_names[1:],
        endogenous=(0,), unit_ids=np.arange(n), time_ids=np.zeros(n, dtype=int),
        fe=est.FixedEffectsSpec(False, False), hac_bandwidth=bandwidth)


# --- tail probabilities -------------------------------------------------------


def test_tail_chi2_at_zero():
    for df in (1, 3, 10):
        assert diag.tail_probability("chi2", 0.0, df) == 1.0


def test_tail_chi2_matches_reported_j_rows():
    assert diag.tail_probability("chi2", 3.1132, 3) == approx(0.3745, abs=5e-4)
    assert diag.tail_probability("chi2", 3.2199, 3) == approx(0.3589, abs=5e-4)


def test_tail_chi2_closed_forms():
    # df = 2: exp(-x/2); df = 4: exp(-x/2) (1 + x/2)
    for x in (0.3, 1.7, 5.0, 11.0):
        assert diag.tail_probability("chi2", x, 2) == approx(math.exp(-x / 2), rel=1e-12)
        assert diag.tail_probability("chi2", x, 4) == \
            approx(math.exp(-x / 2) * (1 + x / 2), rel=1e-12)


def test_tail_f_closed_form():
    # F(2, d2) upper tail: (1 + 2x/d2)^(-d2/2)
    for x in (0.5, 1.0, 3.0):
        for d2 in (4, 10, 60):
            assert diag.tail_probability("F", x, 2, d2) == \
                approx((1 + 2 * x / d2) ** (-d2 / 2), rel=1e-10)


def test_tail_validation():
    with pytest.raises(ValueError):
        diag.tail_probability("chi2", 1.0, 0)
    with pytest.raises(ValueError):
        diag.tail_probability("chi2", -0.5, 2)
    with pytest.raises(ValueError):
        diag.tail_probability("F", 1.0, 2)
    with pytest.raises(ValueError):
        diag.tail_probability("gauss", 1.0, 2)


# --- Hansen J ------------------------------------------------------------------


def test_j_zero_when_exactly_identified():
    rng = np.random.default_rng(100)
    problem = iv_problem(rng, l_excluded=1)
    result = est.gmm_two_step(problem)
    j = diag.hansen_j(result)
    assert abs(j.statistic) < 1e-8
    assert j.p_value == 1.0
    assert j.df == 0


def test_j_size_under_valid_instruments():
    rejections = 0
    reps = 1000
    for rep in range(reps):
        rng = np.random.default_rng([2024, rep])
        problem = iv_problem(rng, n=500, l_excluded=3)
        result = est.gmm_two_step(problem)
        if diag.hansen_j(result).p_value < 0.05:
            rejections += 1
    assert 0.035 <= rejections / reps <= 0.065


def test_j_power_against_invalid_instrument():
    rejections = 0
    reps = 200
    for rep in range(reps):
        rng = np.random.default_rng([2025, rep])
        problem = iv_problem(rng, n=2000, l_excluded=2, contaminate=0.3145)
        result = est.gmm_two_step(problem)
        if diag.hansen_j(result).p_value < 0.05:
            rejections += 1
    assert rejections / reps > 0.80


def test_j_invariant_to_instrument_reparameterization():
    rng = np.random.default_rng(101)
    problem = iv_problem(rng, n=400, l_excluded=3)
    T = rng.uniform(0.5, 1.5, size=(3, 3)) + np.eye(3)
    transformed = est.EstimationProblem(
        y=problem.y, X=problem.X, Z=problem.Z @ T, x_names=problem.x_names,
        z_names=problem.z_names, endogenous=problem.endogenous,
        unit_ids=problem.unit_ids, time_ids=problem.time_ids, fe=problem.fe,
        hac_bandwidth=0)
    j_a = diag.hansen_j(est.gmm_two_step(problem))
    j_b = diag.hansen_j(est.gmm_two_step(transformed))
    assert j_a.statistic == approx(j_b.statistic, rel=1e-6, abs=1e-9)


def test_j_internal_consistency():
    rng = np.random.default_rng(102)
    problem = iv_problem(rng, n=300, l_excluded=3)
    j = diag.hansen_j(est.gmm_two_step(problem))
    assert j.p_value == approx(
        diag.tail_probability(j.distribution, j.statistic, j.df), abs=1e-10)


# --- KP rank LM -----------------------------------------------------------------


def test_kp_lm_size_under_irrelevant_instruments():
    rejections = 0
    reps = 500
    for rep in range(reps):
        rng = np.random.default_rng([31, rep])
        problem = iv_problem(rng, n=400, l_excluded=2, pi=0.0)
        if diag.underidentification_lm(problem).p_value < 0.05:
            rejections += 1
    assert 0.03 <= rejections / reps <= 0.08


def test_kp_lm_power_under_strong_instruments():
    rejections = 0
    reps = 300
    for rep in range(reps):
        rng = np.random.default_rng([32, rep])
        problem = iv_problem(rng, n=400, l_excluded=2, pi=0.6)
        if diag.underidentification_lm(problem).p_value < 0.05:
            rejections += 1
    assert rejections / reps > 0.99


def test_kp_lm_homoscedastic_weighting_is_anderson_lm():
    rng = np.random.default_rng(33)
    problem = iv_problem(rng, n=600, l_excluded=2, pi=0.5, k_exog=2)
    design = est.prepare_design(problem)
    lm = diag.underidentification_lm(design, weighting="homoscedastic")
    # canonical-correlation oracle on the partialled blocks, separate route
    exog = design.X[:, 1:]
    Q, _ = np.linalg.qr(exog)
    x = design.X[:, [0]] - Q @ (Q.T @ design.X[:, [0]])
    z = design.Z[:, :2] - Q @ (Q.T @ design.Z[:, :2])
    n = design.n
    sxx = x.T @ x / n
    szz = z.T @ z / n
    szx = z.T @ x / n
    eigs = np.linalg.eigvals(np.linalg.solve(sxx, szx.T) @ np.linalg.solve(szz, szx))
    anderson = n * float(np.min(eigs.real))
    assert lm.statistic == approx(anderson, rel=1e-10)
    assert lm.df == 2


def test_kp_lm_robust_close_to_anderson_on_homoscedastic_data():
    # weakly loaded single instrument at large n: the robust statistic and the
    # canonical-correlation statistic estimate the same object
    rng = np.random.default_rng(34)
    problem = iv_problem(rng, n=10_000, l_excluded=1, pi=0.15, rho=0.0)
    robust = diag.underidentification_lm(problem).statistic
    hom = diag.underidentification_lm(problem, weighting="homoscedastic").statistic
    assert robust == approx(hom, rel=0.05)


def test_kp_lm_true_rank_deficiency_is_the_null():
    # two endogenous regressors driven by one instrument direction: H0 holds
    rejections = 0
    reps = 300
    for rep in range(reps):
        rng = np.random.default_rng([35, rep])
        n = 400
        z = rng.standard_normal((n, 3))
        common = z[:, 0]
        x1 = 0.8 * common + rng.standard_normal(n)
        x2 = 0.8 * common + rng.standard_normal(n)
        y = x1 + x2 + rng.standard_normal(n)
        problem = est.EstimationProblem(
            y=y, X=np.column_stack([x1, x2]), Z=z, x_names=["x1", "x2"],
            z_names=["z0", "z1", "z2"], endogenous=(0, 1),
            unit_ids=np.arange(n), time_ids=np.zeros(n, dtype=int),
            fe=est.FixedEffectsSpec(False, False), hac_bandwidth=0)
        if diag.underidentification_lm(problem).p_value < 0.05:
            rejections += 1
    assert 0.02 <= rejections / reps <= 0.09


def test_kp_lm_order_condition_guard():
    rng = np.random.default_rng(36)
    n = 100
    z = rng.standard_normal((n, 1))
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    problem = est.EstimationProblem(
        y=rng.standard_normal(n), X=np.column_stack([x1, x2]),
        Z=np.column_stack([z, x2]), x_names=["x1", "x2"], z_names=["z0", "x2"],
        endogenous=(0,), unit_ids=np.arange(n), time_ids=np.zeros(n, dtype=int),
        fe=est.FixedEffectsSpec(False, False), hac_bandwidth=0)
    problem.endogenous = (0, 1)  # two endogenous, one excluded instrument
    problem.x_names = ["x1", "x2"]
    with pytest.raises(ValueError, match="order condition"):
        diag.underidentification_lm(problem)


# --- weak instrument statistics ---------------------------------------------------


def first_stage_f_oracle(design):
    """Homoscedastic first-stage F for one endogenous column, via plain regressions."""
    exog = design.X[:, 1:]
    x = design.X[:, [0]]
    z = design.Z[:, :design.excluded_instrument_count]
    if exog.shape[1]:
        Q, _ = np.linalg.qr(exog)
        x = x - Q @ (Q.T @ x)
        z = z - Q @ (Q.T @ z)
    Qz, _ = np.linalg.qr(z)
    fitted = Qz @ (Qz.T @ x)
    resid = x - fitted
    l2 = z.shape[1]
    df2 = design.n - design.Z.shape[1]
    ess = float((fitted ** 2).sum())
    rss = float((resid ** 2).sum())
    return (ess / l2) / (rss / df2)


def test_cd_equals_first_stage_f_exactly():
    rng = np.random.default_rng(40)
    problem = iv_problem(rng, n=300, l_excluded=1, pi=0.5, k_exog=3)
    design = est.prepare_design(problem)
    cd, _ = diag.weak_instrument_stats(design)
    assert cd.statistic == approx(first_stage_f_oracle(design), abs=1e-10)


def test_kp_wald_homoscedastic_weighting_equals_cd():
    rng = np.random.default_rng(41)
    problem = iv_problem(rng, n=300, l_excluded=3, pi=0.5, k_exog=2)
    cd, kp = diag.weak_instrument_stats(problem, weighting="homoscedastic")
    assert kp.statistic == approx(cd.statistic, rel=1e-10)


def test_cd_concentrates_near_one_under_irrelevance():
    values = []
    for rep in range(500):
        rng = np.random.default_rng([42, rep])
        problem = iv_problem(rng, n=200, l_excluded=1, pi=0.0)
        cd, _ = diag.weak_instrument_stats(problem)
        values.append(cd.statistic)
    assert 0.7 <= float(np.mean(values)) <= 1.4


def test_cd_mean_matches_concentration_parameter():
    # concentration parameter engineered to 100 rep by rep: E[CD] ~ 101
    values = []
    for rep in range(500):
        rng = np.random.default_rng([43, rep])
        n = 500
        z = rng.standard_normal(n)
        coef = 10.0 / math.sqrt(float(z @ z))
        v = rng.standard_normal(n)
        x = coef * z + v
        y = x + rng.standard_normal(n)
        problem = est.EstimationProblem(
            y=y, X=x[:, None], Z=z[:, None], x_names=["x"], z_names=["z"],
            endogenous=(0,), unit_ids=np.arange(n), time_ids=np.zeros(n, dtype=int),
            fe=est.FixedEffectsSpec(False, False), hac_bandwidth=0)
        cd, _ = diag.weak_instrument_stats(problem)
        values.append(cd.statistic)
    assert abs(float(np.mean(values)) - 101.0) / 101.0 < 0.10


def test_weak_stats_invariant_to_instrument_scaling():
    rng = np.random.default_rng(44)
    problem = iv_problem(rng, n=300, l_excluded=2, pi=0.5)
    scaled_Z = problem.Z.copy()
    scaled_Z[:, 0] *= 13.0
    scaled = est.EstimationProblem(
        y=problem.y, X=problem.X, Z=scaled_Z, x_names=problem.x_names,
        z_names=problem.z_names, endogenous=problem.endogenous,
        unit_ids=problem.unit_ids, time_ids=problem.time_ids, fe=problem.fe,
        hac_bandwidth=0)
    for weighting in ("robust", "homoscedastic"):
        cd_a, kp_a = diag.weak_instrument_stats(problem, weighting=weighting)
        cd_b, kp_b = diag.weak_instrument_stats(scaled, weighting=weighting)
        assert cd_a.statistic == approx(cd_b.statistic, rel=1e-6)
        assert kp_a.statistic == approx(kp_b.statistic, rel=1e-6)
    lm_a = diag.underidentification_lm(problem)
    lm_b = diag.underidentification_lm(scaled)
    assert lm_a.statistic == approx(lm_b.statistic, rel=1e-6)


def test_weak_stats_report_f_form_without_p_values():
    rng = np.random.default_rng(45)
    cd, kp = diag.weak_instrument_stats(iv_problem(rng, l_excluded=2))
    for result in (cd, kp):
        assert result.distribution == "F"
        assert result.df == 2
        assert result.p_value is None


# --- Cumby-Huizinga ---------------------------------------------------------------


def test_ch_zero_residuals():
    result = diag.cumby_huizinga(np.zeros(40), np.repeat([0, 1], 20), np.tile(np.arange(20), 2))
    assert result.statistic == 0.0
    assert result.p_value == 1.0


def test_ch_size_under_iid():
    rejections = 0
    reps = 500
    for rep in range(reps):
        rng = np.random.default_rng([51, rep])
        units, periods = 25, 40
        u = rng.standard_normal(units * periods)
        result = diag.cumby_huizinga(
            u, np.repeat(np.arange(units), periods), np.tile(np.arange(periods), units))
        if result.p_value < 0.05:
            rejections += 1
    assert 0.03 <= rejections / reps <= 0.08


def test_ch_power_under_ar1():
    rejections = 0
    reps = 200
    for rep in range(reps):
        rng = np.random.default_rng([52, rep])
        units, periods = 25, 80
        e = rng.standard_normal((units, periods))
        u = np.empty_like(e)
        u[:, 0] = e[:, 0]
        for t in range(1, periods):
            u[:, t] = 0.5 * u[:, t - 1] + e[:, t]
        result = diag.cumby_huizinga(
            u.ravel(), np.repeat(np.arange(units), periods),
            np.tile(np.arange(periods), units))
        if result.p_value < 0.05:
            rejections += 1
    assert rejections / reps > 0.95


def test_ch_detects_seasonal_dependence_within_lag_range():
    rng = np.random.default_rng(55)
    units, periods = 30, 120
    e = rng.standard_normal((units, periods))
    u = e.copy()
    for t in range(12, periods):
        u[:, t] = 0.55 * u[:, t - 12] + e[:, t]
    uid = np.repeat(np.arange(units), periods)
    tid = np.tile(np.arange(periods), units)
    full = diag.cumby_huizinga(u.ravel(), uid, tid, lags=range(1, 14))
    pinpoint = diag.cumby_huizinga(u.ravel(), uid, tid, lags=[12])
    assert full.p_value < 1e-6
    assert pinpoint.p_value < 1e-6
    assert pinpoint.df == 1


def test_ch_drops_unusable_lags_with_warning():
    rng = np.random.default_rng(53)
    units, periods = 10, 6
    u = rng.standard_normal(units * periods)
    with pytest.warns(UserWarning, match="dropped"):
        result = diag.cumby_huizinga(
            u, np.repeat(np.arange(units), periods), np.tile(np.arange(periods), units),
            lags=range(1, 14))
    assert result.df == 5  # lags 1..5 usable below unit length 6


# --- heteroscedasticity tests --------------------------------------------------------


def ols_problem(rng, n=400, het=False):
    X = rng.standard_normal((n, 2))
    u = rng.standard_normal(n)
    if het:
        u = u * np.sqrt((1.0 + X[:, 0] ** 2) / 2.0)
    y = X @ np.array([1.0, -1.0]) + u
    return est.EstimationProblem(
        y=y, X=X, Z=X.copy(), x_names=["x0", "x1"], z_names=["x0", "x1"],
        endogenous=(), unit_ids=np.arange(n), time_ids=np.zeros(n, dtype=int),
        fe=est.FixedEffectsSpec(False, False), hac_bandwidth=0)


@pytest.mark.parametrize("variant", diag.HET_VARIANTS)
def test_het_size_under_homoscedasticity(variant):
    rejections = 0
    reps = 500
    for rep in range(reps):
        rng = np.random.default_rng([61, rep])
        problem = ols_problem(rng)
        residuals = est.ols(problem).residuals
        result = diag.heteroscedasticity_tests(residuals, problem, variant)
        if result.p_value < 0.05:
            rejections += 1
    assert 0.03 <= rejections / reps <= 0.08, variant


def test_pagan_hall_size_with_endogenous_regressor():
    rejections = 0
    reps = 500
    for rep in range(reps):
        rng = np.random.default_rng([62, rep])
        problem = iv_problem(rng, n=400, l_excluded=2, pi=0.7, rho=0.6)
        residuals = est.gmm_two_step(problem).residuals
        result = diag.heteroscedasticity_tests(residuals, problem, "pagan_hall")
        if result.p_value < 0.05:
            rejections += 1
    assert 0.03 <= rejections / reps <= 0.08


def test_white_koenker_power_with_squares():
    rejections = 0
    reps = 200
    for rep in range(reps):
        rng = np.random.default_rng([63, rep])
        problem = ols_problem(rng, n=2000, het=True)
        residuals = est.ols(problem).residuals
        result = diag.heteroscedasticity_tests(
            residuals, problem, "white_koenker", auxiliary=diag.AUX_SQUARES)
        if result.p_value < 0.05:
            rejections += 1
    assert rejections / reps > 0.95


def test_het_constant_residuals_gives_zero():
    rng = np.random.default_rng(64)
    problem = ols_problem(rng, n=100)
    u = np.ones(100)
    assert diag.heteroscedasticity_tests(u, problem, "white_koenker").statistic == \
        approx(0.0, abs=1e-20)
    assert diag.heteroscedasticity_tests(u, problem, "breusch_pagan").statistic == \
        approx(0.0, abs=1e-18)


def test_het_drops_collinear_auxiliary_columns():
    rng = np.random.default_rng(65)
    n = 120
    x = rng.standard_normal(n)
    X = np.column_stack([x, 2.0 * x])
    problem = est.EstimationProblem(
        y=rng.standard_normal(n), X=X, Z=X.copy(), x_names=["x0", "x1"],
        z_names=["x0", "x1"], endogenous=(), unit_ids=np.arange(n),
        time_ids=np.zeros(n, dtype=int), fe=est.FixedEffectsSpec(False, False),
        hac_bandwidth=0)
    with pytest.warns(UserWarning, match="collinear"):
        result = diag.heteroscedasticity_tests(
            rng.standard_normal(n), problem, "white_koenker")
    assert result.df == 1


def test_het_fitted_values_auxiliary():
    rng = np.random.default_rng(66)
    problem = ols_problem(rng)
    residuals = est.ols(problem).residuals
    result = diag.heteroscedasticity_tests(residuals, problem, "breusch_pagan",
                                           auxiliary=diag.AUX_FITTED)
    assert result.df == 2
    assert 0.0 <= result.p_value <= 1.0


def test_het_unknown_variant_errors():
    rng = np.random.default_rng(67)
    problem = ols_problem(rng, n=50)
    with pytest.raises(ValueError):
        diag.heteroscedasticity_tests(np.ones(50), problem, "glejser")


def test_standard_battery_contents():
    rng = np.random.default_rng(70)
    problem = iv_problem(rng, n=400, l_excluded=3)
    expected = {"kp_rk_lm", "cragg_donald_wald_f", "kp_rk_wald_f", "hansen_j"}
    for estimator in (est.gmm_two_step, est.liml):
        battery = diag.standard_battery(estimator(problem))
        assert set(battery) == expected
        assert battery["hansen_j"].df == 2
        assert battery["kp_rk_lm"].p_value is not None
    ols_battery = diag.standard_battery(est.ols(iv_problem(rng, l_excluded=1)))
    assert ols_battery == {}


# --- cross-checks against scipy ---------------------------------------------------


def test_tail_probability_against_scipy():
    rng = np.random.default_rng(68)
    for _ in range(50):
        x = float(rng.uniform(0, 20))
        df = int(rng.integers(1, 30))
        assert diag.tail_probability("chi2", x, df) == approx(stats.chi2.sf(x, df), abs=1e-12)
        df2 = int(rng.integers(3, 200))
        assert diag.tail_probability("F", x, df, df2) == approx(stats.f.sf(x, df, df2), abs=1e-10)
