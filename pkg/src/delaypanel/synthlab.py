"""Synthetic data with known parameters: linear panel DGPs and a toy flight market.

Every generator draws from a substream derived from one master seed, so
parallel and serial replication runs agree byte for byte. The linear DGP has
a single designated endogenous regressor whose analytic least-squares limit
is recorded alongside the truth, which is what the endogeneity and sign-flip
acceptance runs check against.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .estimators import EstimationProblem, FixedEffectsSpec


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for (master seed, key...): substream k of a run is substream(seed, k)."""
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


@dataclass(frozen=True)
class DgpConfig:
    """Linear panel DGP: y = X beta + unit effects + time effects + u.

    The first column of X is endogenous: x = pi * zbar + v with zbar the
    normalized sum of n_instruments independent standard normal instruments,
    and corr(u, v) = rho. u has standard deviation u_scale and an optional
    AR(ar_phi) component within units; heteroscedastic scales its variance
    with (1 + x^2) around the same average level.
    """

    n_units: int
    n_periods: int
    beta: tuple[float, ...] = (1.0,)
    rho: float = 0.0
    pi: float = 1.0
    ar_phi: float = 0.0
    heteroscedastic: bool = False
    unit_effect_sd: float = 1.0
    time_effect_sd: float = 1.0
    v_scale: float = 1.0
    u_scale: float = 1.0
    n_instruments: int = 1
    seed: int = 0

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if not -1.0 < self.ar_phi < 1.0:
            raise ValueError(f"ar_phi must lie in (-1, 1), got {self.ar_phi}")
        if self.n_instruments < 1:
            raise ValueError("need at least one instrument")
        if self.v_scale <= 0 or self.u_scale <= 0:
            raise ValueError("scales must be positive")

    @property
    def ols_plim(self) -> float:
        """Probability limit of the least-squares coefficient on the endogenous column."""
        var_x = self.pi ** 2 + self.v_scale ** 2
        return self.beta[0] + self.rho * self.u_scale * self.v_scale / var_x


@dataclass(frozen=True)
class DgpTruth:
    beta: tuple[float, ...]
    rho: float
    pi: float
    ar_phi: float
    ols_plim: float


def generate_linear_panel(cfg: DgpConfig, rep: int = 0):
    """Draw one panel from the DGP; returns the estimation problem and the truth record."""
    rng = substream(cfg.seed, rep)
    units, periods = cfg.n_units, cfg.n_periods
    n = units * periods
    L = cfg.n_instruments

    z = rng.standard_normal((n, L))
    v = cfg.v_scale * rng.standard_normal(n)
    x_endog = z @ np.full(L, cfg.pi / math.sqrt(L)) + v

    k_extra = len(cfg.beta) - 1
    x_exog = rng.standard_normal((n, k_extra)) if k_extra else np.empty((n, 0))

    noise = rng.standard_normal((units, periods))
    if cfg.ar_phi != 0.0:
        e = np.empty_like(noise)
        e[:, 0] = noise[:, 0]
        damp = math.sqrt(1.0 - cfg.ar_phi ** 2)
        for t in range(1, periods):
            e[:, t] = cfg.ar_phi * e[:, t - 1] + damp * noise[:, t]
    else:
        e = noise
    u = (cfg.rho * (cfg.u_scale / cfg.v_scale) * v
         + cfg.u_scale * math.sqrt(1.0 - cfg.rho ** 2) * e.ravel())
    if cfg.heteroscedastic:
        mean_sq = 1.0 + cfg.pi ** 2 + cfg.v_scale ** 2
        u = u * np.sqrt((1.0 + x_endog ** 2) / mean_sq)

    unit_ids = np.repeat(np.arange(units), periods)
    time_ids = np.tile(np.arange(periods), units)
    alpha = cfg.unit_effect_sd * rng.standard_normal(units)
    delta = cfg.time_effect_sd * rng.standard_normal(periods)

    X = np.column_stack([x_endog, x_exog])
    y = X @ np.asarray(cfg.beta) + alpha[unit_ids] + delta[time_ids] + u
    x_names = ["x_endog"] + [f"x{j}" for j in range(1, len(cfg.beta))]
    z_names = [f"iv{j}" for j in range(L)] + x_names[1:]
    Z = np.column_stack([z, x_exog])

    problem = EstimationProblem(
        y=y, X=X, Z=Z, x_names=x_names, z_names=z_names,
        endogenous=(0,), unit_ids=unit_ids, time_ids=time_ids,
        fe=FixedEffectsSpec(cfg.unit_effect_sd > 0, cfg.time_effect_sd > 0),
    )
    truth = DgpTruth(cfg.beta, cfg.rho, cfg.pi, cfg.ar_phi, cfg.ols_plim)
    return problem, truth


def sign_flip_scenario(n_units: int = 250, n_periods: int = 20, seed: int = 0) -> DgpConfig:
    """Positive structural effect, negative least-squares limit.

    The endogenous coefficient is +0.8 while cov(x, u)/var(x) = -1, so the
    least-squares limit is -0.2 and the IV route recovers the positive truth.
    """
    u_scale = math.sqrt(7.25)
    return DgpConfig(
        n_units=n_units, n_periods=n_periods,
        beta=(0.8,), rho=-5.0 / (2.0 * u_scale), pi=1.0,
        v_scale=2.0, u_scale=u_scale,
        unit_effect_sd=0.5, time_effect_sd=0.5,
        seed=seed,
    )


def oracle_ols(y, X) -> np.ndarray:
    """Normal-equation solve by elementary Gaussian elimination; test oracle only.

    X'X and X'y are accumulated with compensated summation, then eliminated
    with partial pivoting in plain Python floats, independent of the linear
    algebra used by the estimators.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, k = X.shape
    if n > 10_000 or k > 50:
        raise ValueError("oracle limited to n <= 10000, K <= 50")

    A = [[math.fsum(float(X[i, a]) * float(X[i, b]) for i in range(n)) for b in range(k)]
         for a in range(k)]
    b = [math.fsum(float(X[i, a]) * float(y[i]) for i in range(n)) for a in range(k)]

    for col in range(k):
        pivot = max(range(col, k), key=lambda r: abs(A[r][col]))
        if abs(A[pivot][col]) < 1e-12 * max(1.0, abs(A[col][col])):
            raise ValueError("normal equations are singular")
        if pivot != col:
            A[col], A[pivot] = A[pivot], A[col]
            b[col], b[pivot] = b[pivot], b[col]
        for row in range(col + 1, k):
            factor = A[row][col] / A[col][col]
            for c in range(col, k):
                A[row][c] -= factor * A[col][c]
            b[row] -= factor * b[col]

    beta = [0.0] * k
    for row in range(k - 1, -1, -1):
        acc = b[row] - math.fsum(A[row][c] * beta[c] for c in range(row + 1, k))
        beta[row] = acc / A[row][row]
    return np.asarray(beta)


@dataclass
class MarketScenario:
    """A toy airline market that exercises the full ingest and panel path.

    Delay odds rise with scheduled movements above declared capacity in a
    flight's hour; this keeps the pipeline honest without pretending to model
    a real network. lcc_entry_month maps a directional pair to the 1-based
    month at which the low-cost carrier starts carrying passengers on it.
    """

    cities: tuple[tuple[str, float, float], ...]
    carriers: tuple[tuple[str, str], ...]
    n_months: int = 12
    start_year: int = 2010
    flights_per_pair_day: int = 2
    hourly_capacity: int = 10
    base_delay_rate: float = 0.2
    congestion_sensitivity: float = 0.5
    cause_weights: tuple[float, float, float, float] = (0.4, 0.1, 0.2, 0.3)
    mean_monthly_pax: int = 500
    lcc_entry_month: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class MarketFiles:
    """The generated CSV payloads, byte-identical for a fixed seed."""

    flights: str
    traffic: str
    cities: str
    airports: str
    capacity: str
    codeshare: str

    def write(self, directory: str) -> dict[str, str]:
        paths = {}
        os.makedirs(directory, exist_ok=True)
        for name in ("flights", "traffic", "cities", "airports", "capacity", "codeshare"):
            path = os.path.join(directory, f"{name}.csv")
            with open(path, "w", newline="") as handle:
                handle.write(getattr(self, name))
            paths[name] = path
        return paths


def _month_labels(scenario: MarketScenario) -> list[str]:
    labels = []
    year, month = scenario.start_year, 1
    for _ in range(scenario.n_months):
        labels.append(f"{year:04d}-{month:02d}")
        month += 1
        if month > 12:
            month = 1
            year += 1
    return labels


def _days_in(label: str) -> int:
    import calendar

    year, month = (int(part) for part in label.split("-"))
    return calendar.monthrange(year, month)[1]


def _haversine_km(a, b) -> float:
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * 6371.0088 * math.asin(math.sqrt(h))


def load_dgp_config(path: str) -> DgpConfig:
    """Read a DgpConfig from a key-value file ([dgp] section, INI syntax)."""
    import configparser

    parser = configparser.ConfigParser()
    if not parser.read(path) or not parser.has_section("dgp"):
        raise ValueError(f"no [dgp] section in {path}")
    section = parser["dgp"]
    beta = tuple(float(v) for v in section.get("beta", "1.0").split(","))
    return DgpConfig(
        n_units=section.getint("n_units"),
        n_periods=section.getint("n_periods"),
        beta=beta,
        rho=section.getfloat("rho", 0.0),
        pi=section.getfloat("pi", 1.0),
        ar_phi=section.getfloat("ar_phi", 0.0),
        heteroscedastic=section.getboolean("heteroscedastic", False),
        unit_effect_sd=section.getfloat("unit_effect_sd", 1.0),
        time_effect_sd=section.getfloat("time_effect_sd", 1.0),
        v_scale=section.getfloat("v_scale", 1.0),
        u_scale=section.getfloat("u_scale", 1.0),
        n_instruments=section.getint("n_instruments", 1),
        seed=section.getint("seed", 0),
    )


def generate_market(scenario: MarketScenario) -> MarketFiles:
    """Emit flight, traffic, capacity, city, airport and codeshare CSVs for the scenario."""
    rng = substream(scenario.seed)
    months = _month_labels(scenario)
    city_ids = [c[0] for c in scenario.cities]
    coords = {c[0]: (c[1], c[2]) for c in scenario.cities}
    airport_of = {c: f"A{c}" for c in city_ids}
    pairs = [(o, d) for o in city_ids for d in city_ids if o != d]
    fsc = [code for code, klass in scenario.carriers if klass == "FSC"]
    lcc = [code for code, klass in scenario.carriers if klass == "LCC"]

    # pass 1: deterministic schedule; daily frequency alternates by (pair, month)
    # so the congestion-split regressors vary within pairs
    schedule = []
    for month_idx, month in enumerate(months, start=1):
        for pair_idx, (origin, destination) in enumerate(pairs):
            duration = 45 + int(_haversine_km(coords[origin], coords[destination]) / 12)
            slots = scenario.flights_per_pair_day + (pair_idx + month_idx) % 2
            for day in range(1, _days_in(month) + 1):
                for slot in range(slots):
                    hour = (6 + 4 * slot + pair_idx + 2 * day) % 18 + 5
                    dep = datetime(int(month[:4]), int(month[5:7]), day, hour, 0)
                    arr = dep + timedelta(minutes=duration)
                    carrier = fsc[(day + slot) % len(fsc)]
                    schedule.append((month_idx, pair_idx, origin, destination,
                                     slot, dep, arr, carrier))

    movements: dict[tuple[str, str, int], int] = {}
    for _, _, origin, destination, _, dep, arr, _ in schedule:
        for city, ts in ((origin, dep), (destination, arr)):
            key = (city, ts.strftime("%Y-%m-%d"), ts.hour)
            movements[key] = movements.get(key, 0) + 1

    # pass 2: delays driven by excess movements over capacity
    base_logit = math.log(scenario.base_delay_rate / (1 - scenario.base_delay_rate))
    flights_out = io.StringIO()
    writer = csv.writer(flights_out, lineterminator="\n")
    writer.writerow(["carrier", "carrier_class", "origin_airport", "dest_airport",
                     "flight_no", "sched_dep", "actual_dep", "sched_arr", "actual_arr",
                     "cancelled", "cause_code"])
    causes = ["WEATHER", "INCIDENT", "CONNECTION", "OTHER"]
    weights = np.asarray(scenario.cause_weights, dtype=float)
    weights = weights / weights.sum()
    for _, pair_idx, origin, destination, slot, dep, arr, carrier in schedule:
        excess = 0
        for city, ts in ((origin, dep), (destination, arr)):
            key = (city, ts.strftime("%Y-%m-%d"), ts.hour)
            excess += max(0, movements[key] - scenario.hourly_capacity)
        p = 1.0 / (1.0 + math.exp(-(base_logit + scenario.congestion_sensitivity * excess)))
        if rng.random() < p:
            arr_delay = 16 + int(rng.exponential(20.0))
            cause = causes[int(rng.choice(4, p=weights))]
        else:
            arr_delay = int(rng.integers(-10, 11))
            cause = "NONE"
        dep_delay = arr_delay - int(rng.integers(0, 6))
        fmt = "%Y-%m-%dT%H:%M"
        writer.writerow([
            carrier, "FSC", airport_of[origin], airport_of[destination],
            f"{100 + pair_idx}{slot}",
            dep.strftime(fmt), (dep + timedelta(minutes=dep_delay)).strftime(fmt),
            arr.strftime(fmt), (arr + timedelta(minutes=arr_delay)).strftime(fmt),
            "false", cause,
        ])

    traffic_out = io.StringIO()
    writer = csv.writer(traffic_out, lineterminator="\n")
    writer.writerow(["carrier", "carrier_class", "origin_city", "dest_city",
                     "month", "revenue_pax"])
    for month_idx, month in enumerate(months, start=1):
        for origin, destination in pairs:
            for code in fsc:
                pax = 1 + int(rng.poisson(scenario.mean_monthly_pax))
                writer.writerow([code, "FSC", origin, destination, month, pax])
            entry = scenario.lcc_entry_month.get((origin, destination))
            if entry is not None and month_idx >= entry:
                for code in lcc:
                    pax = 1 + int(rng.poisson(scenario.mean_monthly_pax / 2))
                    writer.writerow([code, "LCC", origin, destination, month, pax])

    cities_out = io.StringIO()
    writer = csv.writer(cities_out, lineterminator="\n")
    writer.writerow(["city_id", "lat", "lon"])
    for city_id, lat, lon in scenario.cities:
        writer.writerow([city_id, lat, lon])

    airports_out = io.StringIO()
    writer = csv.writer(airports_out, lineterminator="\n")
    writer.writerow(["airport_code", "city_id"])
    for city_id in city_ids:
        writer.writerow([airport_of[city_id], city_id])

    capacity_out = io.StringIO()
    writer = csv.writer(capacity_out, lineterminator="\n")
    writer.writerow(["city_id", "hourly_capacity"])
    for city_id in city_ids:
        writer.writerow([city_id, scenario.hourly_capacity])

    codeshare_out = io.StringIO()
    writer = csv.writer(codeshare_out, lineterminator="\n")
    writer.writerow(["origin_city", "dest_city", "start_month", "end_month"])

    return MarketFiles(
        flights=flights_out.getvalue(),
        traffic=traffic_out.getvalue(),
        cities=cities_out.getvalue(),
        airports=airports_out.getvalue(),
        capacity=capacity_out.getvalue(),
        codeshare=codeshare_out.getvalue(),
    )
