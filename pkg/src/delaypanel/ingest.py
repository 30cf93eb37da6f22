"""Parsing and validation of the four raw datasets: flights, traffic, capacities, cities.

All inputs are CSV. Airports are resolved to city ids at parse time so every
downstream structure works on directional city-pairs. Malformed rows never
abort a parse: they are collected into a reject report with their line number.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from datetime import datetime

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"

FLIGHTS_COLUMNS = [
    "carrier", "carrier_class", "origin_airport", "dest_airport", "flight_no",
    "sched_dep", "actual_dep", "sched_arr", "actual_arr", "cancelled", "cause_code",
]
TRAFFIC_COLUMNS = ["carrier", "carrier_class", "origin_city", "dest_city", "month", "revenue_pax"]
CITIES_COLUMNS = ["city_id", "lat", "lon"]
AIRPORTS_COLUMNS = ["airport_code", "city_id"]
CAPACITY_COLUMNS = ["city_id", "hourly_capacity"]
CODESHARE_COLUMNS = ["origin_city", "dest_city", "start_month", "end_month"]


class IngestError(Exception):
    """Unrecoverable input problem (empty file, bad header, broken registry)."""


class CarrierClass(enum.Enum):
    FSC = "FSC"
    LCC = "LCC"


class CauseCode(enum.Enum):
    NONE = "NONE"
    WEATHER = "WEATHER"
    INCIDENT = "INCIDENT"
    CONNECTION = "CONNECTION"
    OTHER = "OTHER"


@dataclass(frozen=True)
class FlightRecord:
    """One scheduled flight leg, with airports already resolved to city ids."""

    carrier_code: str
    carrier_class: CarrierClass
    origin_city: str
    destination_city: str
    flight_number: str
    scheduled_departure: datetime
    actual_departure: datetime | None
    scheduled_arrival: datetime
    actual_arrival: datetime | None
    cancelled: bool
    cause_code: CauseCode

    @property
    def month(self) -> str:
        """Calendar month of the scheduled departure, as YYYY-MM."""
        return self.scheduled_departure.strftime("%Y-%m")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.origin_city, self.destination_city)


@dataclass(frozen=True)
class TrafficRecord:
    """Revenue passengers for one (carrier, directional city-pair, month)."""

    carrier_code: str
    carrier_class: CarrierClass
    origin_city: str
    destination_city: str
    month: str
    revenue_pax: int


@dataclass(frozen=True)
class City:
    city_id: str
    latitude: float
    longitude: float


@dataclass(frozen=True)
class DelayStatus:
    """Signed delays in whole minutes plus the strict-threshold flags."""

    arrival_delay_minutes: int
    departure_delay_minutes: int
    arrival_delayed: bool
    departure_delayed: bool


@dataclass(frozen=True)
class RejectedRow:
    line_number: int
    reason: str


@dataclass
class FlightParseReport:
    """Accepted records plus the reject report; counts always reconcile."""

    accepted: list[FlightRecord]
    rejected: list[RejectedRow]

    @property
    def total_rows(self) -> int:
        return len(self.accepted) + len(self.rejected)


class CityRegistry:
    """City coordinates and the airport-to-city map.

    A city id is accepted wherever an airport code is expected, so records
    serialized at the city level re-parse cleanly.
    """

    def __init__(self, cities: list[City], airport_to_city: dict[str, str]):
        self.cities: dict[str, City] = {}
        for c in cities:
            if c.city_id in self.cities:
                raise IngestError(f"duplicate city id {c.city_id!r}")
            if not -90.0 <= c.latitude <= 90.0:
                raise IngestError(f"latitude out of range for {c.city_id!r}: {c.latitude}")
            if not -180.0 <= c.longitude <= 180.0:
                raise IngestError(f"longitude out of range for {c.city_id!r}: {c.longitude}")
            self.cities[c.city_id] = c
        self.airport_to_city = dict(airport_to_city)
        for code, city_id in self.airport_to_city.items():
            if city_id not in self.cities:
                raise IngestError(f"airport {code!r} maps to unknown city {city_id!r}")

    def resolve(self, code: str) -> str:
        """Map an airport code (or city id) to its city id."""
        if code in self.airport_to_city:
            return self.airport_to_city[code]
        if code in self.cities:
            return code
        raise KeyError(code)

    def coordinates(self, city_id: str) -> tuple[float, float]:
        c = self.cities[city_id]
        return (c.latitude, c.longitude)

    def city_ids(self) -> list[str]:
        return sorted(self.cities)


class CapacityRegistry:
    """Declared hourly movement capacity per city."""

    def __init__(self, capacities: dict[str, int]):
        for city_id, cap in capacities.items():
            if cap <= 0:
                raise IngestError(f"capacity for {city_id!r} must be positive, got {cap}")
        self._capacities = dict(capacities)

    def capacity(self, city_id: str) -> int:
        try:
            return self._capacities[city_id]
        except KeyError:
            raise IngestError(f"no declared capacity for city {city_id!r}") from None


class CodeshareTable:
    """Directional pair-level codeshare windows, inclusive month ranges."""

    def __init__(self, windows: list[tuple[str, str, str, str]]):
        self._windows = list(windows)

    def active(self, pair: tuple[str, str], month: str) -> bool:
        o, d = pair
        return any(
            o == wo and d == wd and start <= month <= end
            for wo, wd, start, end in self._windows
        )


def _as_text(stream) -> io.StringIO:
    if isinstance(stream, bytes):
        return io.StringIO(stream.decode("utf-8"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    data = stream.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return io.StringIO(data)


def _reader(stream, expected_columns, what: str) -> csv.DictReader:
    text = _as_text(stream)
    reader = csv.DictReader(text)
    if reader.fieldnames is None:
        raise IngestError(f"empty {what} file")
    if list(reader.fieldnames) != expected_columns:
        raise IngestError(
            f"unexpected {what} header {reader.fieldnames}; expected {expected_columns}"
        )
    return reader


def _parse_timestamp(value: str) -> datetime:
    return datetime.strptime(value, TIMESTAMP_FORMAT)


def _parse_optional_timestamp(value: str) -> datetime | None:
    if value == "":
        return None
    return _parse_timestamp(value)


def parse_flights(stream, registry: CityRegistry) -> FlightParseReport:
    """Parse a flights CSV into validated records.

    Rows with unknown airports, unparseable timestamps, inconsistent
    cancellation state or an intra-city leg are rejected with their line
    number. Duplicate (carrier, flight number, scheduled departure) rows keep
    the first occurrence. Accepted output is sorted by
    (scheduled departure, carrier, flight number) so chunked parses merge
    order-stably.
    """
    reader = _reader(stream, FLIGHTS_COLUMNS, "flights")
    accepted: list[FlightRecord] = []
    rejected: list[RejectedRow] = []
    seen: set[tuple[str, str, datetime]] = set()
    rows = 0
    for line_no, row in enumerate(reader, start=2):
        rows += 1
        try:
            record = _parse_flight_row(row, registry)
        except ValueError as exc:
            rejected.append(RejectedRow(line_no, str(exc)))
            continue
        key = (record.carrier_code, record.flight_number, record.scheduled_departure)
        if key in seen:
            rejected.append(RejectedRow(line_no, f"duplicate flight {key}"))
            continue
        seen.add(key)
        accepted.append(record)
    if rows == 0:
        raise IngestError("flights file has no data rows")
    accepted.sort(key=lambda r: (r.scheduled_departure, r.carrier_code, r.flight_number))
    return FlightParseReport(accepted=accepted, rejected=rejected)


def _parse_flight_row(row: dict, registry: CityRegistry) -> FlightRecord:
    try:
        carrier_class = CarrierClass(row["carrier_class"])
    except ValueError:
        raise ValueError(f"unknown carrier class {row['carrier_class']!r}")
    try:
        cause = CauseCode(row["cause_code"])
    except ValueError:
        raise ValueError(f"unknown cause code {row['cause_code']!r}")

    cancelled_raw = row["cancelled"].strip().lower()
    if cancelled_raw not in ("true", "false"):
        raise ValueError(f"cancelled must be true/false, got {row['cancelled']!r}")
    cancelled = cancelled_raw == "true"

    try:
        origin = registry.resolve(row["origin_airport"])
    except KeyError:
        raise ValueError(f"unknown airport code {row['origin_airport']!r}")
    try:
        destination = registry.resolve(row["dest_airport"])
    except KeyError:
        raise ValueError(f"unknown airport code {row['dest_airport']!r}")
    if origin == destination:
        raise ValueError(f"origin and destination resolve to the same city {origin!r}")

    try:
        sched_dep = _parse_timestamp(row["sched_dep"])
        sched_arr = _parse_timestamp(row["sched_arr"])
        actual_dep = _parse_optional_timestamp(row["actual_dep"])
        actual_arr = _parse_optional_timestamp(row["actual_arr"])
    except ValueError:
        raise ValueError("unparseable timestamp")

    if sched_arr <= sched_dep:
        raise ValueError("scheduled arrival not after scheduled departure")
    if cancelled:
        if actual_dep is not None or actual_arr is not None:
            raise ValueError("cancelled flight carries actual timestamps")
    else:
        if actual_dep is None or actual_arr is None:
            raise ValueError("operated flight missing actual timestamps")

    return FlightRecord(
        carrier_code=row["carrier"],
        carrier_class=carrier_class,
        origin_city=origin,
        destination_city=destination,
        flight_number=row["flight_no"],
        scheduled_departure=sched_dep,
        actual_departure=actual_dep,
        scheduled_arrival=sched_arr,
        actual_arrival=actual_arr,
        cancelled=cancelled,
        cause_code=cause,
    )


def serialize_flights(records: list[FlightRecord]) -> str:
    """Render records back to the flights CSV format (city ids in the airport columns)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(FLIGHTS_COLUMNS)
    for r in records:
        writer.writerow([
            r.carrier_code,
            r.carrier_class.value,
            r.origin_city,
            r.destination_city,
            r.flight_number,
            r.scheduled_departure.strftime(TIMESTAMP_FORMAT),
            "" if r.actual_departure is None else r.actual_departure.strftime(TIMESTAMP_FORMAT),
            r.scheduled_arrival.strftime(TIMESTAMP_FORMAT),
            "" if r.actual_arrival is None else r.actual_arrival.strftime(TIMESTAMP_FORMAT),
            "true" if r.cancelled else "false",
            r.cause_code.value,
        ])
    return out.getvalue()


def classify_delay(flight: FlightRecord, threshold: int = 15) -> DelayStatus:
    """Signed arrival/departure delays in whole minutes, flags strict against the threshold.

    Cancelled flights never enter delay statistics and raise ValueError.
    """
    if flight.cancelled:
        raise ValueError("cannot classify a cancelled flight")
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    arr = _delta_minutes(flight.scheduled_arrival, flight.actual_arrival)
    dep = _delta_minutes(flight.scheduled_departure, flight.actual_departure)
    return DelayStatus(
        arrival_delay_minutes=arr,
        departure_delay_minutes=dep,
        arrival_delayed=arr > threshold,
        departure_delayed=dep > threshold,
    )


def _delta_minutes(scheduled: datetime, actual: datetime) -> int:
    return round((actual - scheduled).total_seconds() / 60.0)


def parse_traffic(stream) -> list[TrafficRecord]:
    reader = _reader(stream, TRAFFIC_COLUMNS, "traffic")
    records: list[TrafficRecord] = []
    seen: set[tuple[str, str, str, str]] = set()
    for line_no, row in enumerate(reader, start=2):
        try:
            carrier_class = CarrierClass(row["carrier_class"])
            pax = int(row["revenue_pax"])
        except ValueError as exc:
            raise IngestError(f"traffic line {line_no}: {exc}") from None
        if pax < 0:
            raise IngestError(f"traffic line {line_no}: negative revenue_pax {pax}")
        key = (row["carrier"], row["origin_city"], row["dest_city"], row["month"])
        if key in seen:
            raise IngestError(f"traffic line {line_no}: duplicate record {key}")
        seen.add(key)
        records.append(TrafficRecord(
            carrier_code=row["carrier"],
            carrier_class=carrier_class,
            origin_city=row["origin_city"],
            destination_city=row["dest_city"],
            month=row["month"],
            revenue_pax=pax,
        ))
    if not records:
        raise IngestError("traffic file has no data rows")
    return records


def parse_city_registry(cities_stream, airports_stream) -> CityRegistry:
    cities_reader = _reader(cities_stream, CITIES_COLUMNS, "cities")
    cities = []
    for line_no, row in enumerate(cities_reader, start=2):
        try:
            cities.append(City(row["city_id"], float(row["lat"]), float(row["lon"])))
        except ValueError:
            raise IngestError(f"cities line {line_no}: bad coordinates") from None
    airports_reader = _reader(airports_stream, AIRPORTS_COLUMNS, "airports")
    airport_to_city: dict[str, str] = {}
    for line_no, row in enumerate(airports_reader, start=2):
        code = row["airport_code"]
        if code in airport_to_city:
            raise IngestError(f"airports line {line_no}: airport {code!r} mapped twice")
        airport_to_city[code] = row["city_id"]
    return CityRegistry(cities, airport_to_city)


def parse_capacities(stream) -> CapacityRegistry:
    reader = _reader(stream, CAPACITY_COLUMNS, "capacity")
    capacities: dict[str, int] = {}
    for line_no, row in enumerate(reader, start=2):
        try:
            cap = int(row["hourly_capacity"])
        except ValueError:
            raise IngestError(f"capacity line {line_no}: bad capacity") from None
        if row["city_id"] in capacities:
            raise IngestError(f"capacity line {line_no}: duplicate city {row['city_id']!r}")
        capacities[row["city_id"]] = cap
    return CapacityRegistry(capacities)


def parse_codeshare(stream) -> CodeshareTable:
    reader = _reader(stream, CODESHARE_COLUMNS, "codeshare")
    windows = []
    for line_no, row in enumerate(reader, start=2):
        if row["start_month"] > row["end_month"]:
            raise IngestError(f"codeshare line {line_no}: start month after end month")
        windows.append((row["origin_city"], row["dest_city"], row["start_month"], row["end_month"]))
    return CodeshareTable(windows)
