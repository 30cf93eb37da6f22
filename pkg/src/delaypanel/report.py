"""Rendering of regression tables and descriptive statistics.

The text renderer consumes plain dictionaries (the JSON form of results), so
re-rendering a written JSON file reproduces the table byte for byte.
"""

from __future__ import annotations

import math

from .estimators import EstimationResult
from .panel import DescriptiveStats

STAT_ROWS = [
    ("Adj. R-squared", ("fit", "adj_r_squared")),
    ("RMSE", ("fit", "rmse")),
    ("F statistic", ("fit", "f_statistic")),
]
DIAGNOSTIC_ROWS = [
    ("Underid. KP rk LM", "kp_rk_lm", "statistic"),
    ("KP rk LM p-value", "kp_rk_lm", "p_value"),
    ("Hansen J", "hansen_j", "statistic"),
    ("Hansen J p-value", "hansen_j", "p_value"),
    ("Weak id. Cragg-Donald F", "cragg_donald_wald_f", "statistic"),
    ("Weak id. KP Wald F", "kp_rk_wald_f", "statistic"),
]


def two_sided_normal_p(t_ratio: float) -> float:
    return math.erfc(abs(t_ratio) / math.sqrt(2.0))


def significance_stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.10:
        return "*"
    return ""


def result_to_dict(result: EstimationResult, label: str, regressand: str,
                   unit_effects: bool, time_effects: bool) -> dict:
    coefficients = []
    for j, name in enumerate(result.x_names):
        estimate = float(result.coefficients[j])
        se = float(result.std_errors[j])
        t = estimate / se if se > 0 else math.inf
        coefficients.append({
            "name": name,
            "estimate": estimate,
            "std_error": se,
            "p_value": two_sided_normal_p(t),
        })
    diagnostics = {}
    for key, test in result.diagnostics.items():
        diagnostics[key] = {
            "name": test.name,
            "statistic": test.statistic,
            "distribution": test.distribution,
            "df": test.df,
            "df2": test.df2,
            "p_value": test.p_value,
        }
    return {
        "label": label,
        "estimator": result.estimator,
        "regressand": regressand,
        "n": result.n,
        "n_params": result.n_params,
        "n_instruments": result.n_instruments,
        "overid_df": result.overid_df,
        "bandwidth": result.bandwidth,
        "absorbed": result.absorbed,
        "kappa": result.kappa,
        "fixed_effects": {"unit": unit_effects, "time": time_effects},
        "structural": list(result.structural_names),
        "coefficients": coefficients,
        "fit": {
            "adj_r_squared": result.fit.adj_r_squared,
            "rmse": result.fit.rmse,
            "f_statistic": result.fit.f_statistic,
            "f_df": list(result.fit.f_df),
        },
        "diagnostics": diagnostics,
    }


def _cell(value: str, width: int) -> str:
    return value.rjust(width)


def _fmt(value, width: int) -> str:
    if value is None:
        return _cell("", width)
    return _cell(f"{value:.4f}", width)


def render_regression_table(columns: list[dict], width: int = 16) -> str:
    """Side-by-side text table: coefficients with stars, bracketed standard errors below.

    Significance stars mark two-sided p-values below 1, 5 and 10 percent.
    Failed columns render empty with the error annotated under the table.
    """
    if not columns:
        raise ValueError("no columns to render")
    ok = [c for c in columns if "error" not in c]
    row_names: list[str] = []
    for c in ok:
        for name in c["structural"]:
            if name not in row_names:
                row_names.append(name)

    label_width = max([len("Weak id. Cragg-Donald F")]
                      + [len(name) for name in row_names]
                      + [len("city-pair fixed effects")]) + 2
    lines = []
    header = " " * label_width + "".join(_cell(c["label"], width) for c in columns)
    lines.append(header)
    lines.append("-" * len(header))

    def coef_entry(c: dict, name: str) -> tuple[str, str]:
        if "error" in c:
            return "", ""
        match = next((e for e in c["coefficients"] if e["name"] == name), None)
        if match is None:
            return "", ""
        stars = significance_stars(match["p_value"])
        return f"{match['estimate']:.4f}{stars}", f"[{match['std_error']:.4f}]"

    for name in row_names:
        tops, bottoms = [], []
        for c in columns:
            top, bottom = coef_entry(c, name)
            tops.append(_cell(top, width))
            bottoms.append(_cell(bottom, width))
        lines.append(name.ljust(label_width) + "".join(tops))
        lines.append(" " * label_width + "".join(bottoms))

    for label, key in (("city-pair fixed effects", "unit"), ("time fixed effects", "time")):
        cells = []
        for c in columns:
            if "error" in c:
                cells.append(_cell("", width))
            else:
                cells.append(_cell("yes" if c["fixed_effects"][key] else "no", width))
        lines.append(label.ljust(label_width) + "".join(cells))

    for label, path in STAT_ROWS:
        cells = []
        for c in columns:
            if "error" in c:
                cells.append(_cell("", width))
            else:
                cells.append(_fmt(c[path[0]][path[1]], width))
        lines.append(label.ljust(label_width) + "".join(cells))

    for label, key, field_name in DIAGNOSTIC_ROWS:
        if not any(key in c.get("diagnostics", {}) for c in ok):
            continue
        cells = []
        for c in columns:
            test = c.get("diagnostics", {}).get(key) if "error" not in c else None
            cells.append(_fmt(test[field_name] if test else None, width))
        lines.append(label.ljust(label_width) + "".join(cells))

    cells = []
    for c in columns:
        cells.append(_cell("" if "error" in c else str(c["n"]), width))
    lines.append("Observations".ljust(label_width) + "".join(cells))

    failures = [c for c in columns if "error" in c]
    if failures:
        lines.append("")
        for c in failures:
            lines.append(f"{c['label']}: failed ({c['error']})")
    lines.append("")
    lines.append("Standard errors in brackets. *** p<0.01, ** p<0.05, * p<0.10.")
    return "\n".join(lines) + "\n"


def render_descriptive_stats(stats: DescriptiveStats, width: int = 8) -> str:
    """Correlation triangle plus mean/sd/min/max rows, two decimals."""
    label_width = max(len(n) for n in stats.names) + 7
    lines = ["Descriptive statistics", "", "Pearson correlation"]
    for i, name in enumerate(stats.names):
        row = f"{name} ({i + 1})".ljust(label_width)
        cells = []
        for j in range(i + 1):
            value = stats.correlation[(name, stats.names[j])]
            cells.append(_cell("" if math.isnan(value) else f"{value:.2f}", width))
        lines.append(row + "".join(cells))
    lines.append("")
    lines.append("Univariate statistics")
    for label, mapping in (("Mean", stats.mean), ("Std. dev.", stats.sd),
                           ("Minimum", stats.minimum), ("Maximum", stats.maximum)):
        row = label.ljust(label_width)
        row += "".join(_cell(f"{mapping[name]:.2f}", width) for name in stats.names)
        lines.append(row)
    lines.append("")
    lines.append("Columns: " + ", ".join(
        f"({i + 1}) {name}" for i, name in enumerate(stats.names)))
    return "\n".join(lines) + "\n"
