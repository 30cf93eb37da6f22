"""Distance-cutoff instruments built from the same variable on far-away routes.

The value of an endogenous panel column on route k at month t is instrumented
by its mean over routes whose endpoint cities all lie at least a cutoff
distance from both endpoints of k, so geographically transmitted common
shocks are excluded by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ingest import CityRegistry
from .panel import PanelObservation

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088

DEFAULT_CUTOFFS_KM = (150.0, 300.0, 500.0)
DEFAULT_TARGETS = ("hhi_pair", "hhi_max_city", "lcc_pair", "lcc_max_city")


@dataclass(frozen=True)
class InstrumentSpec:
    """One target panel column and the distance cutoffs to build columns for."""

    target: str
    cutoffs_km: tuple[float, ...] = DEFAULT_CUTOFFS_KM

    def __post_init__(self):
        if not self.cutoffs_km:
            raise ValueError("at least one cutoff required")
        if any(c <= 0 for c in self.cutoffs_km):
            raise ValueError("cutoffs must be positive")
        if any(b <= a for a, b in zip(self.cutoffs_km, self.cutoffs_km[1:])):
            raise ValueError("cutoffs must be strictly increasing")

    def labels(self) -> list[str]:
        return [f"{self.target}__ge{_format_km(c)}km" for c in self.cutoffs_km]


def _format_km(cutoff: float) -> str:
    return str(int(cutoff)) if float(cutoff).is_integer() else str(cutoff)


def great_circle_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Haversine distance in km between two (latitude, longitude) points in degrees."""
    for lat, lon in (a, b):
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude out of range: {lat}")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude out of range: {lon}")
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


class DistanceMatrix:
    """Symmetric great-circle distances between every pair of cities."""

    def __init__(self, coordinates: dict[str, tuple[float, float]]):
        self.city_ids = sorted(coordinates)
        self._index = {c: i for i, c in enumerate(self.city_ids)}
        n = len(self.city_ids)
        self._km = np.zeros((n, n))
        for i, a in enumerate(self.city_ids):
            for j in range(i + 1, n):
                d = great_circle_km(coordinates[a], coordinates[self.city_ids[j]])
                self._km[i, j] = d
                self._km[j, i] = d

    @classmethod
    def from_registry(cls, registry: CityRegistry) -> "DistanceMatrix":
        return cls({c: registry.coordinates(c) for c in registry.city_ids()})

    def between(self, a: str, b: str) -> float:
        return float(self._km[self._index[a], self._index[b]])

    def pair_separation(self, pair_a: tuple[str, str], pair_b: tuple[str, str]) -> float:
        """Minimum of the four endpoint-city cross distances between two routes."""
        return min(self.between(ca, cb) for ca in pair_a for cb in pair_b)


def _split_pair_id(pid: str) -> tuple[str, str]:
    origin, destination = pid.split("-", 1)
    return origin, destination


def hausman_instrument(
    observations: list[PanelObservation],
    target: str,
    pair: tuple[str, str],
    month: str,
    cutoff_km: float,
    distances: DistanceMatrix,
) -> float | None:
    """Mean of `target` at `month` over routes far enough from `pair`, or None when no route qualifies.

    A donor route qualifies when the minimum of the four endpoint-city cross
    distances is at least the cutoff; any route sharing a city is therefore
    excluded for every positive cutoff.
    """
    values = []
    for obs in observations:
        if obs.month != month:
            continue
        donor_pair = _split_pair_id(obs.pair_id)
        if donor_pair == pair:
            continue
        if distances.pair_separation(pair, donor_pair) < cutoff_km:
            continue
        value = getattr(obs, target)
        if isinstance(value, float) and math.isnan(value):
            continue
        values.append(float(value))
    if not values:
        return None
    return sum(values) / len(values)


def build_instrument_matrix(
    observations: list[PanelObservation],
    specs: list[InstrumentSpec],
    distances: DistanceMatrix,
) -> tuple[np.ndarray, list[str]]:
    """One column per (target, cutoff), row-aligned with the panel; NaN marks missing cells.

    Rows where an instrument is missing are flagged here and dropped by the
    estimation layer together with any other incomplete row.
    """
    panel_fields = {f for f in PanelObservation.__dataclass_fields__}
    for spec in specs:
        if spec.target not in panel_fields:
            raise ValueError(f"instrument target {spec.target!r} is not a panel column")

    labels = [label for spec in specs for label in spec.labels()]
    matrix = np.full((len(observations), len(labels)), np.nan)
    by_month: dict[str, list[PanelObservation]] = {}
    for obs in observations:
        by_month.setdefault(obs.month, []).append(obs)

    col = 0
    for spec in specs:
        for cutoff in spec.cutoffs_km:
            for row, obs in enumerate(observations):
                value = hausman_instrument(
                    by_month[obs.month], spec.target,
                    _split_pair_id(obs.pair_id), obs.month, cutoff, distances)
                if value is None:
                    log.info("no donor route for %s at %s (cutoff %s km, target %s)",
                             obs.pair_id, obs.month, cutoff, spec.target)
                else:
                    matrix[row, col] = value
            col += 1
    return matrix, labels
