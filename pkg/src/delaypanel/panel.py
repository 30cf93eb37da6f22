"""Aggregation of flight and traffic records into the (city-pair, month) panel.

Each observation carries the delay regressands (log-odds and mean-minutes
variants, arrival and departure), the congestion split, delay-cause shares,
endpoint-city delay exposure, concentration indices and low-cost-carrier
presence flags. Regressands are computed over the configured carrier class
(full-service carriers by default); congested hours are determined from all
carriers' scheduled movements.
"""

from __future__ import annotations

import calendar
import csv
import io
import logging
import math
from dataclasses import dataclass, fields
from datetime import date

from .ingest import (
    CapacityRegistry,
    CarrierClass,
    CauseCode,
    CityRegistry,
    CodeshareTable,
    FlightRecord,
    TrafficRecord,
    classify_delay,
)

log = logging.getLogger(__name__)


class UndefinedOddsError(ValueError):
    """Raised when the delayed-flight proportion is 0 or 1 and log-odds are undefined."""


class PanelCellError(ValueError):
    """A (pair, month) cell that cannot be computed and must be dropped."""


@dataclass
class PanelConfig:
    """Knobs for panel construction.

    delay_threshold is strict: a flight is delayed when its delay exceeds the
    threshold in minutes. odds_continuity_correction switches the p in {0, 1}
    cells from undefined to ln[(p + 0.5/n) / (1 - p + 0.5/n)] for sensitivity
    runs; the default drops those cells from odds-based regressions.
    """

    delay_threshold: int = 15
    carrier_class: CarrierClass = CarrierClass.FSC
    odds_continuity_correction: bool = False


@dataclass
class PanelObservation:
    """One directional (city-pair, month) cell with every model variable.

    odds/odds_dep are NaN when the underlying proportion is 0 or 1 (see
    odds_defined for the arrival side). n_flights_total counts scheduled
    flights of the configured carrier class including cancellations, so that
    n_congested + n_uncongested equals n_flights_total divided by the days in
    the month; delay statistics and cause shares are over operated flights.
    """

    pair_id: str
    month: str
    odds: float
    mins: float
    mins_gt_threshold: float
    odds_dep: float
    mins_dep: float
    mins_dep_gt_threshold: float
    n_congested: float
    n_uncongested: float
    prop_weather: float
    prop_incident: float
    prop_connection: float
    max_city_delay_prop: float
    codeshare: int
    hhi_pair: float
    hhi_max_city: float
    lcc_pair: int
    lcc_max_city: int
    n_flights_total: int
    odds_defined: bool


NUMERIC_COLUMNS = [
    "odds", "mins", "mins_gt_threshold", "odds_dep", "mins_dep",
    "mins_dep_gt_threshold", "n_congested", "n_uncongested", "prop_weather",
    "prop_incident", "prop_connection", "max_city_delay_prop", "codeshare",
    "hhi_pair", "hhi_max_city", "lcc_pair", "lcc_max_city", "n_flights_total",
]


def pair_id(pair: tuple[str, str]) -> str:
    return f"{pair[0]}-{pair[1]}"


def logit_odds(p: float) -> float:
    """ln[p / (1 - p)] for a proportion strictly inside (0, 1)."""
    if not 0.0 < p < 1.0:
        raise UndefinedOddsError(f"log-odds undefined at p={p}")
    return math.log(p / (1.0 - p))


def cell_mins(delays, threshold: int | None = None) -> float:
    """Mean signed delay of a cell, optionally truncated to delays strictly above a threshold.

    With a threshold, cells where no flight qualifies return 0.0 so the
    truncated variant keeps the same observation count as the untruncated one.
    """
    delays = list(delays)
    if not delays:
        raise PanelCellError("cell has no operated flights")
    if threshold is None:
        return sum(delays) / len(delays)
    qualifying = [d for d in delays if d > threshold]
    if not qualifying:
        return 0.0
    return sum(qualifying) / len(qualifying)


def congested_hours(city: str, day: date, flights, capacity: int) -> set[int]:
    """Clock hours of `day` whose scheduled movements at `city` strictly exceed capacity.

    Movements are scheduled arrivals plus scheduled departures touching the
    city, over all carriers and including flights later cancelled.
    """
    counts = [0] * 24
    for f in flights:
        if f.origin_city == city and f.scheduled_departure.date() == day:
            counts[f.scheduled_departure.hour] += 1
        if f.destination_city == city and f.scheduled_arrival.date() == day:
            counts[f.scheduled_arrival.hour] += 1
    return {h for h, c in enumerate(counts) if c > capacity}


class CongestionCalendar:
    """Congested (city, day, hour) lookup built once from all scheduled movements."""

    def __init__(self, flights, capacities: CapacityRegistry):
        counts: dict[tuple[str, date, int], int] = {}
        cities = set()
        for f in flights:
            cities.add(f.origin_city)
            cities.add(f.destination_city)
            dep = (f.origin_city, f.scheduled_departure.date(), f.scheduled_departure.hour)
            arr = (f.destination_city, f.scheduled_arrival.date(), f.scheduled_arrival.hour)
            counts[dep] = counts.get(dep, 0) + 1
            counts[arr] = counts.get(arr, 0) + 1
        caps = {c: capacities.capacity(c) for c in cities}
        self._congested = {key for key, n in counts.items() if n > caps[key[0]]}

    def is_congested(self, city: str, day: date, hour: int) -> bool:
        return (city, day, hour) in self._congested


def days_in_month(month: str) -> int:
    year, mon = month.split("-")
    return calendar.monthrange(int(year), int(mon))[1]


def congestion_split(pair, month: str, flights, calendar_: CongestionCalendar):
    """Daily-average counts of the cell's scheduled flights in congested vs uncongested hours.

    A flight is congested when its scheduled departure hour is congested at
    the origin or its scheduled arrival hour is congested at the destination.
    """
    days = days_in_month(month)
    congested = 0
    total = 0
    for f in flights:
        total += 1
        dep_hit = calendar_.is_congested(
            f.origin_city, f.scheduled_departure.date(), f.scheduled_departure.hour)
        arr_hit = calendar_.is_congested(
            f.destination_city, f.scheduled_arrival.date(), f.scheduled_arrival.hour)
        if dep_hit or arr_hit:
            congested += 1
    return congested / days, (total - congested) / days


def hhi(shares) -> float:
    """Sum of squared market shares; shares must be non-negative and sum to one."""
    shares = list(shares)
    if not shares:
        raise ValueError("no shares given")
    if any(s < 0 for s in shares):
        raise ValueError("negative share")
    total = sum(shares)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"shares sum to {total}, not 1")
    return sum(s * s for s in shares)


def _carrier_pax(records) -> dict[str, int]:
    totals: dict[str, int] = {}
    for r in records:
        totals[r.carrier_code] = totals.get(r.carrier_code, 0) + r.revenue_pax
    return totals


def _hhi_from_totals(totals: dict[str, int]) -> float:
    grand = sum(totals.values())
    return hhi([v / grand for v in totals.values()])


def pair_and_city_hhi(traffic, pair, month: str) -> tuple[float, float]:
    """Concentration on the directional pair and the larger of the two endpoint-city HHIs.

    City concentration aggregates each carrier's passengers over every traffic
    record touching the city (as origin or destination) in the month.
    """
    origin, destination = pair
    at_month = [t for t in traffic if t.month == month]
    on_pair = [t for t in at_month
               if t.origin_city == origin and t.destination_city == destination]
    pair_total = sum(t.revenue_pax for t in on_pair)
    if pair_total == 0:
        raise PanelCellError(f"no revenue passengers on {pair} {month}")
    hhi_pair = _hhi_from_totals(_carrier_pax(on_pair))

    city_hhis = []
    for city in (origin, destination):
        touching = [t for t in at_month
                    if t.origin_city == city or t.destination_city == city]
        total = sum(t.revenue_pax for t in touching)
        if total == 0:
            raise PanelCellError(f"no revenue passengers touching {city} in {month}")
        city_hhis.append(_hhi_from_totals(_carrier_pax(touching)))
    return hhi_pair, max(city_hhis)


def lcc_presence(traffic, pair, month: str) -> tuple[int, int]:
    """(pair presence, endpoint-city presence) of low-cost carriers with positive traffic."""
    origin, destination = pair
    on_pair = 0
    at_city = 0
    for t in traffic:
        if t.month != month or t.carrier_class is not CarrierClass.LCC or t.revenue_pax <= 0:
            continue
        if t.origin_city == origin and t.destination_city == destination:
            on_pair = 1
        if origin in (t.origin_city, t.destination_city) or \
                destination in (t.origin_city, t.destination_city):
            at_city = 1
    return on_pair, at_city


class CityDelayTable:
    """Delayed and total operations per (city, month) over all carriers.

    Operations count arrivals and departures of operated flights; an arrival
    is delayed by its arrival delay, a departure by its departure delay, both
    strict against the threshold.
    """

    def __init__(self, flights, threshold: int):
        self._delayed: dict[tuple[str, str], int] = {}
        self._ops: dict[tuple[str, str], int] = {}
        for f in flights:
            if f.cancelled:
                continue
            status = classify_delay(f, threshold)
            dep_key = (f.origin_city, f.month)
            arr_key = (f.destination_city, f.scheduled_arrival.strftime("%Y-%m"))
            self._ops[dep_key] = self._ops.get(dep_key, 0) + 1
            self._delayed[dep_key] = self._delayed.get(dep_key, 0) + int(status.departure_delayed)
            self._ops[arr_key] = self._ops.get(arr_key, 0) + 1
            self._delayed[arr_key] = self._delayed.get(arr_key, 0) + int(status.arrival_delayed)

    def proportion(self, city: str, month: str) -> float:
        ops = self._ops.get((city, month), 0)
        if ops == 0:
            raise PanelCellError(f"city {city} has no operations in {month}")
        return self._delayed[(city, month)] / ops


def max_city_delay_prop(flights, pair, month: str, threshold: int) -> float:
    """Largest delayed-operations share among the cell's two endpoint cities."""
    table = CityDelayTable(flights, threshold)
    return max(table.proportion(city, month) for city in pair)


def _odds_or_nan(delayed: int, total: int, config: PanelConfig) -> tuple[float, bool]:
    p = delayed / total
    if 0.0 < p < 1.0:
        return logit_odds(p), True
    if config.odds_continuity_correction:
        corr = 0.5 / total
        return math.log((p + corr) / (1.0 - p + corr)), True
    return math.nan, False


def build_panel(
    flights: list[FlightRecord],
    traffic: list[TrafficRecord],
    city_registry: CityRegistry,
    capacity_registry: CapacityRegistry,
    codeshare: CodeshareTable,
    config: PanelConfig | None = None,
) -> list[PanelObservation]:
    """Assemble one observation per (directional city-pair, month) with any class-filtered flight.

    Cells whose concentration indices cannot be computed (no traffic on the
    pair or touching an endpoint) are dropped with a logged reason. Cells
    where every flight, or none, is delayed keep NaN odds and are excluded
    from odds-based regressions downstream.
    """
    del city_registry  # airports already resolved at parse time
    config = config or PanelConfig()
    threshold = config.delay_threshold

    cells: dict[tuple[tuple[str, str], str], list[FlightRecord]] = {}
    for f in flights:
        if f.carrier_class is not config.carrier_class:
            continue
        cells.setdefault((f.pair, f.month), []).append(f)

    congestion = CongestionCalendar(flights, capacity_registry)
    city_delays = CityDelayTable(flights, threshold)

    observations: list[PanelObservation] = []
    for (pair, month) in sorted(cells, key=lambda k: (k[0], k[1])):
        cell_flights = cells[(pair, month)]
        operated = [f for f in cell_flights if not f.cancelled]
        if not operated:
            log.info("dropping %s %s: no operated flights", pair, month)
            continue
        try:
            obs = _build_cell(
                pair, month, cell_flights, operated, city_delays, traffic,
                codeshare, congestion, threshold, config)
        except PanelCellError as exc:
            log.info("dropping %s %s: %s", pair, month, exc)
            continue
        observations.append(obs)
    return observations


def _build_cell(pair, month, cell_flights, operated, city_delays, traffic,
                codeshare, congestion, threshold, config) -> PanelObservation:
    statuses = [classify_delay(f, threshold) for f in operated]
    arr_delays = [s.arrival_delay_minutes for s in statuses]
    dep_delays = [s.departure_delay_minutes for s in statuses]
    n_actual = len(operated)

    arr_delayed = sum(s.arrival_delayed for s in statuses)
    dep_delayed = sum(s.departure_delayed for s in statuses)
    odds, odds_defined = _odds_or_nan(arr_delayed, n_actual, config)
    odds_dep, _ = _odds_or_nan(dep_delayed, n_actual, config)

    cause_counts = {CauseCode.WEATHER: 0, CauseCode.INCIDENT: 0, CauseCode.CONNECTION: 0}
    for f, s in zip(operated, statuses):
        if s.arrival_delayed and f.cause_code in cause_counts:
            cause_counts[f.cause_code] += 1

    n_congested, n_uncongested = congestion_split(pair, month, cell_flights, congestion)
    hhi_pair_value, hhi_city_value = pair_and_city_hhi(traffic, pair, month)
    lcc_pair_flag, lcc_city_flag = lcc_presence(traffic, pair, month)

    return PanelObservation(
        pair_id=pair_id(pair),
        month=month,
        odds=odds,
        mins=cell_mins(arr_delays),
        mins_gt_threshold=cell_mins(arr_delays, threshold),
        odds_dep=odds_dep,
        mins_dep=cell_mins(dep_delays),
        mins_dep_gt_threshold=cell_mins(dep_delays, threshold),
        n_congested=n_congested,
        n_uncongested=n_uncongested,
        prop_weather=cause_counts[CauseCode.WEATHER] / n_actual,
        prop_incident=cause_counts[CauseCode.INCIDENT] / n_actual,
        prop_connection=cause_counts[CauseCode.CONNECTION] / n_actual,
        max_city_delay_prop=max(city_delays.proportion(c, month) for c in pair),
        codeshare=int(codeshare.active(pair, month)),
        hhi_pair=hhi_pair_value,
        hhi_max_city=hhi_city_value,
        lcc_pair=lcc_pair_flag,
        lcc_max_city=lcc_city_flag,
        n_flights_total=len(cell_flights),
        odds_defined=odds_defined,
    )


def panel_to_csv(observations: list[PanelObservation]) -> str:
    """Serialize the panel; NaN cells are written as empty fields."""
    names = [f.name for f in fields(PanelObservation)]
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(names)
    for obs in observations:
        row = []
        for name in names:
            value = getattr(obs, name)
            if isinstance(value, bool):
                row.append("true" if value else "false")
            elif isinstance(value, float):
                row.append("" if math.isnan(value) else repr(value))
            else:
                row.append(value)
        writer.writerow(row)
    return out.getvalue()


def panel_from_csv(text: str) -> list[PanelObservation]:
    reader = csv.DictReader(io.StringIO(text))
    spec = {f.name: f.type for f in fields(PanelObservation)}
    observations = []
    for row in reader:
        kwargs = {}
        for name, type_name in spec.items():
            raw = row[name]
            if type_name == "float":
                kwargs[name] = math.nan if raw == "" else float(raw)
            elif type_name == "int":
                kwargs[name] = int(raw)
            elif type_name == "bool":
                kwargs[name] = raw == "true"
            else:
                kwargs[name] = raw
        observations.append(PanelObservation(**kwargs))
    return observations


def column(observations: list[PanelObservation], name: str) -> list[float]:
    return [float(getattr(obs, name)) for obs in observations]


@dataclass
class DescriptiveStats:
    """Univariate summaries and pairwise-complete Pearson correlations."""

    names: list[str]
    mean: dict[str, float]
    sd: dict[str, float]
    minimum: dict[str, float]
    maximum: dict[str, float]
    correlation: dict[tuple[str, str], float]
    n: dict[str, int]


def descriptive_statistics(observations: list[PanelObservation],
                           names: list[str] | None = None) -> DescriptiveStats:
    """Summarize panel columns, ignoring NaN cells column by column."""
    names = names or NUMERIC_COLUMNS
    data = {name: column(observations, name) for name in names}
    mean, sd, minimum, maximum, count = {}, {}, {}, {}, {}
    for name, values in data.items():
        clean = [v for v in values if not math.isnan(v)]
        if not clean:
            raise ValueError(f"column {name} has no defined values")
        count[name] = len(clean)
        mean[name] = sum(clean) / len(clean)
        if len(clean) > 1:
            var = sum((v - mean[name]) ** 2 for v in clean) / (len(clean) - 1)
        else:
            var = 0.0
        sd[name] = math.sqrt(var)
        minimum[name] = min(clean)
        maximum[name] = max(clean)
    correlation = {}
    for i, a in enumerate(names):
        for b in names[: i + 1]:
            correlation[(a, b)] = _pearson(data[a], data[b])
    return DescriptiveStats(names, mean, sd, minimum, maximum, correlation, count)


def _pearson(xs, ys) -> float:
    pairs = [(x, y) for x, y in zip(xs, ys) if not (math.isnan(x) or math.isnan(y))]
    if len(pairs) < 2:
        return math.nan
    n = len(pairs)
    mx = sum(p[0] for p in pairs) / n
    my = sum(p[1] for p in pairs) / n
    sxy = sum((x - mx) * (y - my) for x, y in pairs)
    sxx = sum((x - mx) ** 2 for x, _ in pairs)
    syy = sum((y - my) ** 2 for _, y in pairs)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    return sxy / math.sqrt(sxx * syy)
