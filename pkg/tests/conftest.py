"""Shared fixtures: the hand-computed two-pair/two-month golden market.

Every number asserted against this fixture was computed by hand (spreadsheet
style) before the panel builder existed; see test_panel for the full table.
"""

import math

import pytest

from delaypanel import ingest


def _flight_rows():
    rows = []
    # SAO->RIO, January 2024: one TAM flight per day, days 1-10, 08:00 -> 09:05.
    arr_delays = [-5, 0, 10, 16, 20, 30, 5, 12, 45, -10]
    causes = {4: "WEATHER", 5: "WEATHER", 6: "INCIDENT", 9: "OTHER"}
    for day, arr in zip(range(1, 11), arr_delays):
        dep = arr - 2
        rows.append(_row("TAM", "FSC", "GRU", "GIG", "T100", 2024, 1, day, 8, 0, dep,
                         9, 5, arr, causes.get(day, "NONE")))
    # GOL burst out of SAO on Jan 5 (CGH -> BSB), creating the congested hour 08.
    rows.append(_row("GOL", "LCC", "CGH", "BSB", "G510", 2024, 1, 5, 8, 10, 0, 9, 40, 0, "NONE"))
    rows.append(_row("GOL", "LCC", "CGH", "BSB", "G520", 2024, 1, 5, 8, 20, 0, 9, 50, 0, "NONE"))
    rows.append(_row("GOL", "LCC", "CGH", "BSB", "G530", 2024, 1, 5, 8, 30, 20, 10, 0, 20, "OTHER"))
    # RIO->SAO, January: TAM days 1-10, 18:00 -> 19:05, plus one cancelled leg on Jan 11.
    arr_delays = [0, 0, 0, 0, 25, 0, 0, 0, 0, 18]
    dep_delays = [0, 0, 0, 0, 22, 0, 0, 0, 0, 16]
    causes = {5: "CONNECTION", 10: "WEATHER"}
    for day, (arr, dep) in zip(range(1, 11), zip(arr_delays, dep_delays)):
        rows.append(_row("TAM", "FSC", "GIG", "GRU", "T200", 2024, 1, day, 18, 0, dep,
                         19, 5, arr, causes.get(day, "NONE")))
    rows.append("TAM,FSC,GIG,GRU,T200,2024-01-11T18:00,,2024-01-11T19:05,,true,WEATHER")
    # SAO->RIO, February: every flight delayed (odds undefined), TAM days 1-5 plus VRG day 6.
    arr_delays = [20, 25, 30, 40, 17]
    dep_delays = [18, 23, 28, 38, 10]
    causes = ["WEATHER", "WEATHER", "INCIDENT", "CONNECTION", "OTHER"]
    for day, (arr, dep, cause) in zip(range(1, 6), zip(arr_delays, dep_delays, causes)):
        rows.append(_row("TAM", "FSC", "GRU", "GIG", "T300", 2024, 2, day, 10, 0, dep,
                         11, 5, arr, cause))
    rows.append(_row("VRG", "FSC", "GRU", "GIG", "V300", 2024, 2, 6, 10, 0, 30, 11, 5, 30, "INCIDENT"))
    # GOL arrivals into RIO on Feb 3 make hour 11 congested there.
    rows.append(_row("GOL", "LCC", "BSB", "GIG", "G610", 2024, 2, 3, 10, 0, 0, 11, 10, 0, "NONE"))
    rows.append(_row("GOL", "LCC", "BSB", "GIG", "G620", 2024, 2, 3, 10, 10, 0, 11, 20, 0, "NONE"))
    # RIO->SAO, February: all on time.
    arr_delays = [0, -3, 5, 2, -1]
    for day, arr in zip(range(1, 6), arr_delays):
        rows.append(_row("TAM", "FSC", "GIG", "GRU", "T400", 2024, 2, day, 14, 0, 0,
                         15, 5, arr, "NONE"))
    return rows


def _row(carrier, klass, origin, dest, number, year, month, day,
         dep_h, dep_m, dep_delay, arr_h, arr_m, arr_delay, cause):
    from datetime import datetime, timedelta

    sched_dep = datetime(year, month, day, dep_h, dep_m)
    sched_arr = datetime(year, month, day, arr_h, arr_m)
    actual_dep = sched_dep + timedelta(minutes=dep_delay)
    actual_arr = sched_arr + timedelta(minutes=arr_delay)
    fmt = "%Y-%m-%dT%H:%M"
    return ",".join([
        carrier, klass, origin, dest, number,
        sched_dep.strftime(fmt), actual_dep.strftime(fmt),
        sched_arr.strftime(fmt), actual_arr.strftime(fmt),
        "false", cause,
    ])


GOLDEN_FLIGHTS_HEADER = ("carrier,carrier_class,origin_airport,dest_airport,flight_no,"
                         "sched_dep,actual_dep,sched_arr,actual_arr,cancelled,cause_code")

GOLDEN_TRAFFIC = """carrier,carrier_class,origin_city,dest_city,month,revenue_pax
TAM,FSC,SAO,RIO,2024-01,600
VRG,FSC,SAO,RIO,2024-01,400
TAM,FSC,RIO,SAO,2024-01,500
VRG,FSC,RIO,SAO,2024-01,500
GOL,LCC,SAO,BSB,2024-01,300
GOL,LCC,BSB,SAO,2024-01,300
TAM,FSC,SAO,RIO,2024-02,700
VRG,FSC,SAO,RIO,2024-02,300
TAM,FSC,RIO,SAO,2024-02,1000
"""

GOLDEN_CITIES = """city_id,lat,lon
SAO,-23.55,-46.63
RIO,-22.91,-43.17
BSB,-15.79,-47.88
"""

GOLDEN_AIRPORTS = """airport_code,city_id
GRU,SAO
CGH,SAO
GIG,RIO
SDU,RIO
BSB,BSB
"""

GOLDEN_CAPACITY = """city_id,hourly_capacity
SAO,2
RIO,2
BSB,10
"""

GOLDEN_CODESHARE = """origin_city,dest_city,start_month,end_month
SAO,RIO,2024-01,2024-01
RIO,SAO,2024-01,2024-01
"""


@pytest.fixture(scope="session")
def golden_inputs():
    flights = GOLDEN_FLIGHTS_HEADER + "\n" + "\n".join(_flight_rows()) + "\n"
    return {
        "flights": flights,
        "traffic": GOLDEN_TRAFFIC,
        "cities": GOLDEN_CITIES,
        "airports": GOLDEN_AIRPORTS,
        "capacity": GOLDEN_CAPACITY,
        "codeshare": GOLDEN_CODESHARE,
    }


@pytest.fixture(scope="session")
def golden_parsed(golden_inputs):
    registry = ingest.parse_city_registry(golden_inputs["cities"], golden_inputs["airports"])
    report = ingest.parse_flights(golden_inputs["flights"], registry)
    assert not report.rejected, [r.reason for r in report.rejected]
    return {
        "registry": registry,
        "flights": report.accepted,
        "traffic": ingest.parse_traffic(golden_inputs["traffic"]),
        "capacities": ingest.parse_capacities(golden_inputs["capacity"]),
        "codeshare": ingest.parse_codeshare(golden_inputs["codeshare"]),
    }


@pytest.fixture(scope="session")
def golden_panel(golden_parsed):
    from delaypanel import panel

    return panel.build_panel(
        golden_parsed["flights"], golden_parsed["traffic"], golden_parsed["registry"],
        golden_parsed["capacities"], golden_parsed["codeshare"], panel.PanelConfig())


def nan_equal(a: float, b: float) -> bool:
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return a == b
