"""Panel estimators: OLS, two-step efficient GMM and LIML with HAC covariance.

All estimators share the same preparation path: rows are sorted by
(unit, time), fixed effects are absorbed (within transform plus time dummies
by default, full dummy expansion as a cross-check mode) and the long-run
moment covariance uses a Bartlett kernel with lags taken within units only.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

WITHIN_PLUS_TIME_DUMMIES = "within_plus_time_dummies"
FULL_DUMMIES = "full_dummies"


@dataclass(frozen=True)
class FixedEffectsSpec:
    """Which effects to absorb and how."""

    unit_effects: bool = True
    time_effects: bool = True
    implementation: str = WITHIN_PLUS_TIME_DUMMIES

    def __post_init__(self):
        if self.implementation not in (WITHIN_PLUS_TIME_DUMMIES, FULL_DUMMIES):
            raise ValueError(f"unknown implementation {self.implementation!r}")


@dataclass
class EstimationProblem:
    """Regression inputs for one estimation call.

    Z must contain every exogenous column of X (matched by name); excluded
    instruments are the Z columns that do not appear in X. Rows are in
    arbitrary order; estimators sort them by (unit, time). Inputs must be
    complete: rows with missing values are dropped before the problem is
    built.

    hac_bandwidth None means the rule floor(T**(1/3)) with T the longest unit
    length. dof_correction toggles the small-sample factor
    n / (n - K - absorbed) on the coefficient covariance.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    x_names: list[str]
    z_names: list[str]
    endogenous: tuple[int, ...]
    unit_ids: np.ndarray
    time_ids: np.ndarray
    fe: FixedEffectsSpec = field(default_factory=FixedEffectsSpec)
    hac_bandwidth: int | None = None
    dof_correction: bool = True

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.unit_ids = np.asarray(self.unit_ids)
        self.time_ids = np.asarray(self.time_ids)
        self.endogenous = tuple(self.endogenous)
        n = self.y.shape[0]
        if self.X.shape[0] != n or self.Z.shape[0] != n:
            raise ValueError("y, X and Z must have the same number of rows")
        if self.unit_ids.shape[0] != n or self.time_ids.shape[0] != n:
            raise ValueError("unit and time indices must cover every row")
        if len(self.x_names) != self.X.shape[1] or len(self.z_names) != self.Z.shape[1]:
            raise ValueError("column names must match matrix widths")
        if any(not 0 <= j < self.X.shape[1] for j in self.endogenous):
            raise ValueError("endogenous indices out of range")
        if self.Z.shape[1] < self.X.shape[1]:
            raise ValueError(
                f"order condition violated: {self.Z.shape[1]} instruments for "
                f"{self.X.shape[1]} regressors")
        missing = [self.x_names[j] for j in range(self.X.shape[1])
                   if j not in self.endogenous and self.x_names[j] not in self.z_names]
        if missing:
            raise ValueError(f"exogenous regressors missing from Z: {missing}")
        if np.isnan(self.y).any() or np.isnan(self.X).any() or np.isnan(self.Z).any():
            raise ValueError("inputs contain missing values; drop incomplete rows first")

    @property
    def exogenous(self) -> tuple[int, ...]:
        return tuple(j for j in range(self.X.shape[1]) if j not in self.endogenous)


@dataclass
class FixedEffectsDetail:
    absorbed: int
    n_units: int
    dummy_names: list[str]
    single_observation_rows: np.ndarray


@dataclass
class TransformedDesign:
    """Sorted, fixed-effects-transformed arrays shared by estimators and diagnostics."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    x_names: list[str]
    z_names: list[str]
    structural_names: list[str]
    endogenous: tuple[int, ...]
    unit_codes: np.ndarray
    time_pos: np.ndarray
    bandwidth: int
    absorbed: int
    dof_correction: bool

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def excluded_instrument_count(self) -> int:
        in_x = set(self.x_names)
        return sum(1 for name in self.z_names if name not in in_x)


@dataclass
class FitBlock:
    adj_r_squared: float
    rmse: float
    f_statistic: float
    f_df: tuple[int, int]


@dataclass
class EstimationResult:
    """Coefficients, HAC covariance and fit statistics of one estimation.

    diagnostics is filled by the test battery; design retains the transformed
    arrays so the diagnostics can be computed on exactly the estimation
    sample.
    """

    estimator: str
    coefficients: np.ndarray
    cov: np.ndarray
    std_errors: np.ndarray
    residuals: np.ndarray
    x_names: list[str]
    structural_names: list[str]
    n: int
    n_params: int
    n_instruments: int
    overid_df: int
    fit: FitBlock
    bandwidth: int
    absorbed: int
    kappa: float | None = None
    step1_coefficients: np.ndarray | None = None
    moment_covariance: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    design: TransformedDesign | None = None

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.x_names.index(name)])

    def std_error(self, name: str) -> float:
        return float(self.std_errors[self.x_names.index(name)])


def problem_to_json_dict(problem: EstimationProblem) -> dict:
    """Plain-JSON form of a problem (arrays as lists); inverse of problem_from_json_dict."""
    return {
        "y": problem.y.tolist(),
        "X": problem.X.tolist(),
        "Z": problem.Z.tolist(),
        "x_names": list(problem.x_names),
        "z_names": list(problem.z_names),
        "endogenous": list(problem.endogenous),
        "unit_ids": [str(u) for u in problem.unit_ids],
        "time_ids": [str(t) for t in problem.time_ids],
        "fixed_effects": {
            "unit_effects": problem.fe.unit_effects,
            "time_effects": problem.fe.time_effects,
            "implementation": problem.fe.implementation,
        },
        "hac_bandwidth": problem.hac_bandwidth,
        "dof_correction": problem.dof_correction,
    }


def problem_from_json_dict(payload: dict) -> EstimationProblem:
    fe = payload["fixed_effects"]
    return EstimationProblem(
        y=np.asarray(payload["y"], dtype=float),
        X=np.asarray(payload["X"], dtype=float),
        Z=np.asarray(payload["Z"], dtype=float),
        x_names=list(payload["x_names"]),
        z_names=list(payload["z_names"]),
        endogenous=tuple(payload["endogenous"]),
        unit_ids=np.asarray(payload["unit_ids"]),
        time_ids=np.asarray(payload["time_ids"]),
        fe=FixedEffectsSpec(fe["unit_effects"], fe["time_effects"], fe["implementation"]),
        hac_bandwidth=payload["hac_bandwidth"],
        dof_correction=payload["dof_correction"],
    )


def bartlett_weight(j: int, bandwidth: int) -> float:
    """Bartlett kernel weight for lag j: (L + 1 - j)/(L + 1) up to the bandwidth, 0 beyond."""
    if j < 0 or bandwidth < 0:
        raise ValueError("lag and bandwidth must be non-negative")
    if j > bandwidth:
        return 0.0
    return (bandwidth + 1 - j) / (bandwidth + 1)


def bandwidth_rule(longest_unit: int) -> int:
    """floor(T**(1/3)) for the longest unit length T."""
    return int(math.floor(longest_unit ** (1.0 / 3.0)))


def _sorted_codes(problem: EstimationProblem):
    _, unit_codes = np.unique(problem.unit_ids, return_inverse=True)
    time_values, time_pos = np.unique(problem.time_ids, return_inverse=True)
    order = np.lexsort((time_pos, unit_codes))
    keys = unit_codes[order] * len(time_values) + time_pos[order]
    if np.unique(keys).shape[0] != keys.shape[0]:
        raise ValueError("duplicate (unit, time) rows")
    return order, unit_codes[order], time_pos[order], len(time_values)


def apply_fixed_effects(problem: EstimationProblem):
    """Absorb the requested effects, returning the transformed problem and bookkeeping.

    Default mode appends one dummy per sample time period (dropping the
    first) to X and Z and demeans every column within units, which matches a
    full dummy expansion by Frisch-Waugh. full_dummies appends explicit unit
    dummies instead of demeaning.
    """
    order, unit_codes, time_pos, n_times = _sorted_codes(problem)
    y = problem.y[order].copy()
    X = problem.X[order].copy()
    Z = problem.Z[order].copy()
    x_names = list(problem.x_names)
    z_names = list(problem.z_names)
    fe = problem.fe
    n = y.shape[0]
    n_units = int(unit_codes.max()) + 1 if n else 0

    time_values = np.unique(problem.time_ids)
    dummy_names: list[str] = []
    if fe.time_effects and n_times > 1:
        dummies = np.zeros((n, n_times - 1))
        for t in range(1, n_times):
            dummies[:, t - 1] = time_pos == t
        dummy_names = [f"t[{time_values[t]}]" for t in range(1, n_times)]
        X = np.hstack([X, dummies])
        Z = np.hstack([Z, dummies])
        x_names += dummy_names
        z_names += dummy_names

    absorbed = 0
    single_rows = np.zeros(0, dtype=int)
    if fe.unit_effects:
        if fe.implementation == WITHIN_PLUS_TIME_DUMMIES:
            counts = np.bincount(unit_codes, minlength=n_units).astype(float)
            y = y - (np.bincount(unit_codes, weights=y) / counts)[unit_codes]
            for mat in (X, Z):
                for j in range(mat.shape[1]):
                    mat[:, j] -= (np.bincount(unit_codes, weights=mat[:, j]) / counts)[unit_codes]
            absorbed = n_units
            single_rows = np.flatnonzero(counts[unit_codes] == 1)
            if single_rows.size:
                log.warning("%d single-observation unit rows are zero after the within transform",
                            single_rows.size)
        else:
            unit_values = np.unique(problem.unit_ids)
            unit_dummies = np.zeros((n, n_units))
            unit_dummies[np.arange(n), unit_codes] = 1.0
            unit_names = [f"u[{u}]" for u in unit_values]
            X = np.hstack([X, unit_dummies])
            Z = np.hstack([Z, unit_dummies])
            x_names += unit_names
            z_names += unit_names

    bandwidth = problem.hac_bandwidth
    if bandwidth is None:
        longest = int(np.bincount(unit_codes).max()) if n else 0
        bandwidth = bandwidth_rule(longest)

    design = TransformedDesign(
        y=y, X=X, Z=Z,
        x_names=x_names, z_names=z_names,
        structural_names=list(problem.x_names),
        endogenous=problem.endogenous,
        unit_codes=unit_codes, time_pos=time_pos,
        bandwidth=int(bandwidth), absorbed=absorbed,
        dof_correction=problem.dof_correction,
    )
    detail = FixedEffectsDetail(
        absorbed=absorbed, n_units=n_units,
        dummy_names=dummy_names, single_observation_rows=single_rows,
    )
    return design, detail


def prepare_design(problem: EstimationProblem) -> TransformedDesign:
    design, _ = apply_fixed_effects(problem)
    return design


def hac_moment_covariance(
    Z: np.ndarray,
    residuals: np.ndarray,
    unit_codes: np.ndarray,
    time_pos: np.ndarray,
    bandwidth: int,
) -> np.ndarray:
    """Bartlett-kernel long-run covariance of the moments z_t * u_t.

    S = G0 + sum_j w(j) (Gj + Gj') with Gj averaging z_t u_t u_{t-j} z_{t-j}'
    over pairs exactly j periods apart within the same unit, divided by the
    total row count. The result is symmetrized and its eigenvalues floored at
    1e-12 * trace(S) / dim before being returned.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    u = np.asarray(residuals, dtype=float).ravel()
    n, L = Z.shape
    moments = Z * u[:, None]
    S = moments.T @ moments / n

    if bandwidth > 0:
        shortest = int(np.bincount(unit_codes).min())
        if bandwidth >= shortest:
            warnings.warn(
                f"HAC bandwidth {bandwidth} is not below the shortest unit length "
                f"{shortest}; lags are truncated within units", stacklevel=2)
        n_times = int(time_pos.max()) + 1
        keys = unit_codes.astype(np.int64) * n_times + time_pos
        order_check = np.all(np.diff(keys) > 0)
        if not order_check:
            raise ValueError("rows must be sorted by (unit, time)")
        for j in range(1, bandwidth + 1):
            target = keys - j
            idx = np.searchsorted(keys, target)
            idx = np.clip(idx, 0, n - 1)
            valid = (keys[idx] == target) & (time_pos >= j)
            if not valid.any():
                continue
            gamma = moments[valid].T @ moments[idx[valid]] / n
            S = S + bartlett_weight(j, bandwidth) * (gamma + gamma.T)

    S = (S + S.T) / 2.0
    floor = 1e-12 * np.trace(S) / L if L else 0.0
    if floor > 0:
        eigenvalues, vectors = np.linalg.eigh(S)
        if eigenvalues[0] < floor:
            S = (vectors * np.clip(eigenvalues, floor, None)) @ vectors.T
            S = (S + S.T) / 2.0
    return S


def _check_full_rank(M: np.ndarray, names: list[str], what: str):
    dependent = _dependent_columns(M, names)
    if dependent:
        raise ValueError(f"{what} is rank deficient; dependent columns: {dependent}")


def _dependent_columns(M: np.ndarray, names: list[str], rtol: float = 1e-10) -> list[str]:
    basis: list[np.ndarray] = []
    dependent = []
    for j in range(M.shape[1]):
        v = M[:, j].astype(float).copy()
        scale = np.linalg.norm(v)
        if scale == 0.0:
            dependent.append(names[j])
            continue
        for q in basis:
            v -= (q @ v) * q
        # second pass stabilizes classical Gram-Schmidt
        for q in basis:
            v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm <= rtol * scale:
            dependent.append(names[j])
        else:
            basis.append(v / norm)
    return dependent


def _dof_factor(design: TransformedDesign) -> float:
    if not design.dof_correction:
        return 1.0
    df = design.n - design.X.shape[1] - design.absorbed
    if df <= 0:
        raise ValueError("non-positive degrees of freedom")
    return design.n / df


def _solve_spd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(A)
        return scipy.linalg.cho_solve((c, low), B)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(A) @ B


def _fit_block(design: TransformedDesign, beta: np.ndarray, cov: np.ndarray,
               residuals: np.ndarray) -> FitBlock:
    n = design.n
    k_total = design.X.shape[1]
    df_resid = n - k_total - design.absorbed
    if df_resid <= 0:
        raise ValueError("non-positive residual degrees of freedom")
    rss = float(residuals @ residuals)
    centered = design.y - design.y.mean()
    tss = float(centered @ centered)
    if tss == 0.0:
        adj_r2 = 1.0 if rss == 0.0 else -math.inf
    else:
        adj_r2 = 1.0 - (rss / df_resid) / (tss / (n - 1))
    rmse = math.sqrt(rss / df_resid)

    slope_idx = [j for j, name in enumerate(design.x_names)
                 if name in design.structural_names]
    q = len(slope_idx)
    if rss == 0.0:
        f_stat = math.inf
    else:
        beta_s = beta[slope_idx]
        cov_s = cov[np.ix_(slope_idx, slope_idx)]
        wald = float(beta_s @ _solve_spd(cov_s, beta_s))
        f_stat = wald / q
    return FitBlock(adj_r_squared=adj_r2, rmse=rmse,
                    f_statistic=f_stat, f_df=(q, df_resid))


def _result(design, estimator, beta, cov, residuals, **extra) -> EstimationResult:
    cov = (cov + cov.T) / 2.0
    std = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    k_endog = len(design.endogenous)
    overid = design.excluded_instrument_count - k_endog
    return EstimationResult(
        estimator=estimator,
        coefficients=beta,
        cov=cov,
        std_errors=std,
        residuals=residuals,
        x_names=list(design.x_names),
        structural_names=list(design.structural_names),
        n=design.n,
        n_params=design.X.shape[1],
        n_instruments=design.Z.shape[1],
        overid_df=overid,
        fit=_fit_block(design, beta, cov, residuals),
        bandwidth=design.bandwidth,
        absorbed=design.absorbed,
        design=design,
        **extra,
    )


def ols(problem: EstimationProblem) -> EstimationResult:
    """Least squares with HAC (Newey-West) covariance."""
    design = prepare_design(problem)
    X, y = design.X, design.y
    _check_full_rank(X, design.x_names, "design matrix")
    Q, R = np.linalg.qr(X)
    beta = scipy.linalg.solve_triangular(R, Q.T @ y)
    residuals = y - X @ beta
    S = hac_moment_covariance(X, residuals, design.unit_codes, design.time_pos,
                              design.bandwidth)
    A = X.T @ X / design.n
    Ainv_S = np.linalg.solve(A, S)
    cov = np.linalg.solve(A, Ainv_S.T).T / design.n * _dof_factor(design)
    return _result(design, "OLS", beta, cov, residuals)


def gmm_two_step(problem: EstimationProblem) -> EstimationResult:
    """Two-step feasible efficient GMM: 2SLS first step, HAC-weighted second step."""
    design = prepare_design(problem)
    X, Z, y = design.X, design.Z, design.y
    _check_full_rank(X, design.x_names, "design matrix")
    _check_full_rank(Z, design.z_names, "instrument matrix")
    ZtZ = Z.T @ Z
    ZtX = Z.T @ X
    Zty = Z.T @ y

    w_ZtX = np.linalg.solve(ZtZ, ZtX)
    A1 = ZtX.T @ w_ZtX
    b1 = w_ZtX.T @ Zty
    beta1 = np.linalg.solve(A1, b1)
    u1 = y - X @ beta1

    S = hac_moment_covariance(Z, u1, design.unit_codes, design.time_pos,
                              design.bandwidth)
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e14:
        raise ValueError(
            "second-step moment covariance is numerically singular; reduce the "
            "bandwidth or the instrument count")
    s_ZtX = _solve_spd(S, ZtX)
    A2 = ZtX.T @ s_ZtX
    b2 = s_ZtX.T @ Zty
    beta2 = np.linalg.solve(A2, b2)
    u2 = y - X @ beta2

    cov = np.linalg.inv(A2) * design.n * _dof_factor(design)
    return _result(design, "2SGMM", beta2, cov, u2,
                   step1_coefficients=beta1, moment_covariance=S)


def liml(problem: EstimationProblem) -> EstimationResult:
    """Limited-information maximum likelihood via the minimum-eigenvalue k-class."""
    design = prepare_design(problem)
    X, Z, y = design.X, design.Z, design.y
    _check_full_rank(X, design.x_names, "design matrix")
    _check_full_rank(Z, design.z_names, "instrument matrix")

    endog = list(design.endogenous)
    exog = [j for j in range(X.shape[1]) if j not in endog]
    Y_til = np.column_stack([y, X[:, endog]])

    Qz, _ = np.linalg.qr(Z)
    QzY = Qz.T @ Y_til
    gram = Y_til.T @ Y_til
    A_full = gram - QzY.T @ QzY
    if exog:
        Qe, _ = np.linalg.qr(X[:, exog])
        QeY = Qe.T @ Y_til
        B_exog = gram - QeY.T @ QeY
    else:
        B_exog = gram

    kappa = float(scipy.linalg.eigh(B_exog, A_full, eigvals_only=True)[0])
    if kappa < 1.0 - 1e-9:
        raise ValueError(f"LIML kappa {kappa} below its theoretical bound of 1")

    QzX = Qz.T @ X
    Qzy = Qz.T @ y
    XtX = X.T @ X
    H = (1.0 - kappa) * XtX + kappa * (QzX.T @ QzX)
    rhs = (1.0 - kappa) * (X.T @ y) + kappa * (QzX.T @ Qzy)
    beta = np.linalg.solve(H, rhs)
    residuals = y - X @ beta

    X_tilde = (1.0 - kappa) * X + kappa * (Qz @ QzX)
    S = hac_moment_covariance(X_tilde, residuals, design.unit_codes,
                              design.time_pos, design.bandwidth)
    Hinv = np.linalg.inv(H)
    cov = Hinv @ (design.n * S) @ Hinv.T * _dof_factor(design)
    return _result(design, "LIML", beta, cov, residuals, kappa=kappa)


ESTIMATORS = {"ols": ols, "gmm2s": gmm_two_step, "liml": liml}
