"""Identification, overidentification, autocorrelation and heteroscedasticity tests.

The rank-based identification tests follow the singular-value-decomposition
construction: the first-stage coefficient matrix (exogenous regressors
partialled out) is normalized, its smallest singular block is extracted and a
quadratic form in a plug-in covariance of the stacked coefficients gives a
chi-square statistic. With homoscedastic weighting the underidentification
statistic reduces exactly to the canonical-correlation LM statistic and the
weak-identification Wald form reduces exactly to the Cragg-Donald F.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .estimators import (
    EstimationProblem,
    EstimationResult,
    TransformedDesign,
    _dependent_columns,
    hac_moment_covariance,
    prepare_design,
)

CHI2 = "chi2"
F = "F"


@dataclass
class TestResult:
    """One statistic with its reference distribution and upper-tail p-value."""

    name: str
    statistic: float
    distribution: str
    df: int
    df2: int | None = None
    p_value: float | None = None


def tail_probability(distribution: str, statistic: float, df: int,
                     df2: int | None = None) -> float:
    """Upper-tail probability via the regularized incomplete gamma (chi2) or beta (F)."""
    if df < 1 or int(df) != df:
        raise ValueError(f"invalid degrees of freedom {df}")
    if statistic < 0:
        raise ValueError(f"negative statistic {statistic}")
    if distribution == CHI2:
        return float(special.gammaincc(df / 2.0, statistic / 2.0))
    if distribution == F:
        if df2 is None or df2 < 1 or int(df2) != df2:
            raise ValueError(f"invalid second degrees of freedom {df2}")
        x = df2 / (df2 + df * statistic)
        return float(special.betainc(df2 / 2.0, df / 2.0, x))
    raise ValueError(f"unknown distribution {distribution!r}")


def _design_of(problem) -> TransformedDesign:
    if isinstance(problem, TransformedDesign):
        return problem
    if isinstance(problem, EstimationProblem):
        return prepare_design(problem)
    raise TypeError(f"expected a problem or design, got {type(problem)!r}")


def hansen_j(result: EstimationResult, Z: np.ndarray | None = None,
             S: np.ndarray | None = None) -> TestResult:
    """Overidentification J statistic at the second-step coefficients.

    J = n gbar' S^{-1} gbar with gbar = Z'u/n. Exactly identified systems give
    J = 0 and p = 1.
    """
    if Z is None:
        Z = result.design.Z
    if S is None:
        S = result.moment_covariance
    if S is None:
        raise ValueError("no moment covariance available; run the two-step estimator")
    u = result.residuals
    n = u.shape[0]
    gbar = Z.T @ u / n
    j = float(n * gbar @ np.linalg.solve(S, gbar))
    if j < -1e-8:
        raise ValueError(f"negative J statistic {j}; scaling inconsistency")
    j = max(j, 0.0)
    df = result.overid_df
    if df == 0:
        p = 1.0
    else:
        p = tail_probability(CHI2, j, df)
    return TestResult("hansen_j", j, CHI2, df, p_value=p)


def _inv_sqrt(M: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh((M + M.T) / 2.0)
    if values[0] <= 0:
        raise ValueError("matrix is not positive definite")
    return (vectors / np.sqrt(values)) @ vectors.T


def _partial_out(A: np.ndarray, B: np.ndarray | None) -> np.ndarray:
    if B is None or B.shape[1] == 0:
        return A.copy()
    Q, _ = np.linalg.qr(B)
    return A - Q @ (Q.T @ A)


def _first_stage_parts(design: TransformedDesign):
    """Split X/Z and partial exogenous regressors out of the endogenous block and excluded instruments."""
    endog = list(design.endogenous)
    if not endog:
        raise ValueError("no endogenous regressors declared")
    exog = [j for j in range(design.X.shape[1]) if j not in endog]
    x_in = set(design.x_names)
    excluded = [j for j, name in enumerate(design.z_names) if name not in x_in]
    if len(excluded) < len(endog):
        raise ValueError(
            f"order condition violated: {len(excluded)} excluded instruments for "
            f"{len(endog)} endogenous regressors")
    exog_mat = design.X[:, exog] if exog else None
    x_part = _partial_out(design.X[:, endog], exog_mat)
    z_part = _partial_out(design.Z[:, excluded], exog_mat)
    return x_part, z_part


def _kron_moments(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    # row i holds vec(right_i left_i') in column-major order: left_a * right_b
    n = left.shape[0]
    return (left[:, :, None] * right[:, None, :]).reshape(n, -1)


def _rank_statistic(C: np.ndarray, shat: np.ndarray, n: int) -> tuple[float, int]:
    """SVD rank-restriction quadratic form for a null of rank deficiency one."""
    k, m = C.shape
    U, _, Vt = np.linalg.svd(C, full_matrices=True)
    U2 = U[:, m - 1:]
    v2 = Vt[m - 1:, :].T
    lam = (U2.T @ C @ v2).ravel()
    R = np.kron(v2, U2)
    omega = R.T @ shat @ R
    stat = float(n * lam @ np.linalg.solve(omega, lam))
    return max(stat, 0.0), k - m + 1


def underidentification_lm(problem, weighting: str = "robust") -> TestResult:
    """Rank LM test that the first-stage coefficient matrix is one short of full rank.

    weighting "robust" plugs in the HAC covariance of the stacked first-stage
    moments; "homoscedastic" plugs in the i.i.d. factorization, under which the
    statistic equals n times the smallest squared canonical correlation
    between the partialled endogenous block and the partialled excluded
    instruments.
    """
    design = _design_of(problem)
    x_part, z_part = _first_stage_parts(design)
    n = design.n
    xt = x_part @ _inv_sqrt(x_part.T @ x_part / n)
    zt = z_part @ _inv_sqrt(z_part.T @ z_part / n)
    C = zt.T @ xt / n
    if weighting == "homoscedastic":
        shat = np.kron(xt.T @ xt / n, zt.T @ zt / n)
    elif weighting == "robust":
        f = _kron_moments(xt, zt)
        shat = hac_moment_covariance(f, np.ones(n), design.unit_codes,
                                     design.time_pos, design.bandwidth)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    stat, df = _rank_statistic(C, shat, n)
    return TestResult("kp_rk_lm", stat, CHI2, df,
                      p_value=tail_probability(CHI2, stat, df))


def weak_instrument_stats(problem, weighting: str = "robust"):
    """Cragg-Donald Wald F and its robust rank-test analog.

    The robust form normalizes the first-stage coefficients by the first-stage
    residual covariance and plugs in a HAC covariance of the residual moments;
    with homoscedastic weighting it equals the Cragg-Donald statistic exactly.
    No p-values are attached: callers compare against their preferred critical
    values.
    """
    design = _design_of(problem)
    x_part, z_part = _first_stage_parts(design)
    n = design.n
    m = x_part.shape[1]
    l2 = z_part.shape[1]
    df2 = n - design.Z.shape[1] - design.absorbed
    if df2 <= 0:
        raise ValueError("non-positive first-stage degrees of freedom")

    Qz, _ = np.linalg.qr(z_part)
    x_proj = Qz @ (Qz.T @ x_part)
    eps = x_part - x_proj
    sigma_vv = x_part.T @ eps / df2  # x'M_z x since z'eps = 0
    sigma_is = _inv_sqrt((sigma_vv + sigma_vv.T) / 2.0)

    cd_core = sigma_is @ (x_part.T @ x_proj / l2) @ sigma_is
    cd = float(np.linalg.eigvalsh((cd_core + cd_core.T) / 2.0)[0])
    cd_result = TestResult("cragg_donald_wald_f", cd, F, l2, df2=df2)

    szz_is = _inv_sqrt(z_part.T @ z_part / n)
    C = szz_is @ (z_part.T @ x_part / n) @ sigma_is
    if weighting == "homoscedastic":
        eps_t = eps @ sigma_is
        shat = np.kron(eps_t.T @ eps_t / df2, (z_part @ szz_is).T @ (z_part @ szz_is) / n)
    elif weighting == "robust":
        f = _kron_moments(eps @ sigma_is, z_part @ szz_is)
        shat = hac_moment_covariance(f, np.ones(n), design.unit_codes,
                                     design.time_pos, design.bandwidth)
        shat = shat * n / df2  # same small-sample scale as the homoscedastic plug-in
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    rk, _ = _rank_statistic(C, shat, n)
    kp_result = TestResult("kp_rk_wald_f", rk / l2, F, l2, df2=df2)
    return cd_result, kp_result


def cumby_huizinga(residuals, unit_ids, time_ids, lags=tuple(range(1, 14))) -> TestResult:
    """Autocorrelation test on within-unit residual autocorrelations at the given lags.

    The statistic is n r' V^{-1} r for the stacked autocorrelations r with a
    heteroscedasticity-robust covariance of the per-observation moment
    products; chi-square with one degree of freedom per retained lag.

    The covariance treats the moment products as serially uncorrelated, which
    holds when the residuals carry no dependence outside the tested lags.
    When screening at unknown orders, test the whole lag range jointly (the
    default covers 1 through 13) rather than a low-order subset.
    """
    u = np.asarray(residuals, dtype=float).ravel()
    unit_ids = np.asarray(unit_ids)
    time_ids = np.asarray(time_ids)
    lags = sorted(set(int(ell) for ell in lags))
    if not lags or lags[0] < 1:
        raise ValueError("lag set must contain positive lags")

    _, unit_codes = np.unique(unit_ids, return_inverse=True)
    _, time_pos = np.unique(time_ids, return_inverse=True)
    order = np.lexsort((time_pos, unit_codes))
    u = u[order]
    unit_codes = unit_codes[order]
    time_pos = time_pos[order]
    n = u.shape[0]

    shortest = int(np.bincount(unit_codes).min())
    kept = [ell for ell in lags if ell < shortest]
    dropped = [ell for ell in lags if ell >= shortest]
    if dropped:
        warnings.warn(f"lags {dropped} reach the shortest unit length {shortest}; dropped",
                      stacklevel=2)
    if not kept:
        raise ValueError("no usable lags below the shortest unit length")

    c0 = float(u @ u) / n
    if c0 == 0.0:
        return TestResult("cumby_huizinga", 0.0, CHI2, len(kept), p_value=1.0)

    n_times = int(time_pos.max()) + 1
    keys = unit_codes.astype(np.int64) * n_times + time_pos
    M = np.zeros((n, len(kept)))
    for col, ell in enumerate(kept):
        target = keys - ell
        idx = np.searchsorted(keys, target)
        idx = np.clip(idx, 0, n - 1)
        valid = (keys[idx] == target) & (time_pos >= ell)
        M[valid, col] = u[valid] * u[idx[valid]] / c0
    r = M.mean(axis=0)
    centered = M - r
    V = centered.T @ centered / n
    stat = float(n * r @ np.linalg.solve(V, r))
    stat = max(stat, 0.0)
    df = len(kept)
    return TestResult("cumby_huizinga", stat, CHI2, df,
                      p_value=tail_probability(CHI2, stat, df))


AUX_LEVELS = "levels"
AUX_SQUARES = "levels_squares_cross"
AUX_FITTED = "fitted"

HET_VARIANTS = ("pagan_hall", "white_koenker", "breusch_pagan")


def _auxiliary_matrix(design: TransformedDesign, residuals: np.ndarray,
                      auxiliary: str) -> tuple[np.ndarray, list[str]]:
    structural = [j for j, name in enumerate(design.x_names)
                  if name in design.structural_names]
    X = design.X[:, structural]
    names = [design.x_names[j] for j in structural]
    if auxiliary == AUX_LEVELS:
        A, labels = X, list(names)
    elif auxiliary == AUX_SQUARES:
        cols = [X]
        labels = list(names)
        k = X.shape[1]
        for i in range(k):
            for j in range(i, k):
                cols.append((X[:, i] * X[:, j])[:, None])
                labels.append(f"{names[i]}*{names[j]}")
        A = np.hstack(cols)
    elif auxiliary == AUX_FITTED:
        fitted = design.y - residuals
        A = np.column_stack([fitted, fitted ** 2])
        labels = ["fitted", "fitted^2"]
    else:
        raise ValueError(f"unknown auxiliary set {auxiliary!r}")
    dependent = _dependent_columns(A - A.mean(axis=0), labels)
    if dependent:
        warnings.warn(f"dropping collinear auxiliary columns: {dependent}", stacklevel=3)
        keep = [j for j, lbl in enumerate(labels) if lbl not in dependent]
        A = A[:, keep]
        labels = [labels[j] for j in keep]
    return A, labels


def heteroscedasticity_tests(residuals, problem, variant: str,
                             auxiliary: str = AUX_LEVELS) -> TestResult:
    """Pagan-Hall, White/Koenker or Breusch-Pagan test of the squared residuals.

    Residuals must align with the prepared design, i.e. be taken from an
    estimator run on the same problem. The Pagan-Hall variant corrects the
    moment covariance for the estimation effect of the coefficients through
    the instrument projection, so it stays valid when regressors are
    endogenous and the residuals come from an IV fit.
    """
    if variant not in HET_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    design = _design_of(problem)
    u = np.asarray(residuals, dtype=float).ravel()
    if u.shape[0] != design.n:
        raise ValueError("residuals do not match the design")
    A, labels = _auxiliary_matrix(design, u, auxiliary)
    p = len(labels)
    n = design.n
    u2 = u ** 2
    sigma2 = float(u2.mean())

    if variant == "white_koenker":
        stat = n * _r_squared(u2, A)
    elif variant == "breusch_pagan":
        if sigma2 == 0.0:
            stat = 0.0
        else:
            g = u2 / sigma2
            fitted = _ols_fit(g, A)
            stat = float(((fitted - fitted.mean()) ** 2).sum()) / 2.0
    else:  # pagan_hall
        a = A - A.mean(axis=0)
        m = a * (u2 - sigma2)[:, None]
        mbar = m.mean(axis=0)
        Qz, _ = np.linalg.qr(design.Z)
        xhat = Qz @ (Qz.T @ design.X)
        G = -2.0 * (a * u[:, None]).T @ design.X / n
        A_inv = np.linalg.inv(xhat.T @ xhat / n)
        influence = (xhat * u[:, None]) @ A_inv.T @ G.T
        g_full = m + influence
        centered = g_full - g_full.mean(axis=0)
        V = centered.T @ centered / n
        stat = float(n * mbar @ np.linalg.solve(V, mbar))

    stat = max(stat, 0.0)
    return TestResult(variant, stat, CHI2, p, p_value=tail_probability(CHI2, stat, p))


def _ols_fit(y: np.ndarray, A: np.ndarray) -> np.ndarray:
    X = np.column_stack([np.ones(A.shape[0]), A])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return X @ beta


def _r_squared(y: np.ndarray, A: np.ndarray) -> float:
    fitted = _ols_fit(y, A)
    resid = y - fitted
    tss = float(((y - y.mean()) ** 2).sum())
    if tss == 0.0:
        return 0.0
    return 1.0 - float(resid @ resid) / tss


def standard_battery(result: EstimationResult) -> dict[str, TestResult]:
    """The diagnostics block reported with IV tables: rank LM, J and weak-instrument F stats."""
    design = result.design
    battery: dict[str, TestResult] = {}
    if result.estimator in ("2SGMM", "LIML") and design.endogenous:
        battery["kp_rk_lm"] = underidentification_lm(design)
        cd, kp = weak_instrument_stats(design)
        battery["cragg_donald_wald_f"] = cd
        battery["kp_rk_wald_f"] = kp
    if result.estimator in ("2SGMM", "LIML"):
        S = result.moment_covariance
        if S is None:
            S = hac_moment_covariance(design.Z, result.residuals, design.unit_codes,
                                      design.time_pos, design.bandwidth)
        battery["hansen_j"] = hansen_j(result, S=S)
    return battery
