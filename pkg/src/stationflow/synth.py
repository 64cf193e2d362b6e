"""Seeded synthetic cities with planted geographic and transit communities.

Stations are scattered around community centers; trips are drawn from a
community-by-community rate kernel with a distinct time-slot mix per
community, so both the geography and the transition patterns carry the
planted structure. Half the stations get status snapshots consistent with
their trip balance; the rest exercise the offset estimation path. The
emitted files use exactly the layouts the ingest readers consume.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date as date_t, timedelta
from pathlib import Path

import numpy as np

from .demand import SLOTS
from .errors import DataError
from .ingest import (
    DistanceMatrix,
    StatusTable,
    TripTable,
    WeatherTable,
    days_in_year,
)

M_PER_DEG_LAT = 110540.0
M_PER_DEG_LON = 111320.0

# Per-community slot activity profiles, cycled when there are more than
# four communities. Distinct mixes keep check-out patterns separable.
_SLOT_PROFILES = np.array(
    [
        [3.0, 1.0, 2.0, 2.0, 1.0],
        [1.0, 3.0, 1.0, 1.0, 2.0],
        [2.0, 2.0, 3.0, 1.5, 0.5],
        [0.8, 1.2, 1.0, 3.0, 2.5],
    ]
)


def default_kernel(n_communities: int, intra_weight: float = 1.0, cross_weight: float = 0.12) -> np.ndarray:
    """Diagonal-dominant (community, community, slot) trip-rate kernel.

    Each community keeps most trips internal and routes its cross traffic
    mainly to the next community, giving every community a recognizably
    different transit signature.
    """
    kernel = np.zeros((n_communities, n_communities, 5))
    for c in range(n_communities):
        profile = _SLOT_PROFILES[c % len(_SLOT_PROFILES)]
        for c2 in range(n_communities):
            if c == c2:
                w = intra_weight
            elif c2 == (c + 1) % n_communities:
                w = cross_weight
            else:
                w = cross_weight / 4.0
            kernel[c, c2] = w * profile
    return kernel


@dataclass(frozen=True)
class SyntheticScenario:
    seed: int
    n_stations: int = 200
    n_communities: int = 4
    n_trips: int = 50_000
    year: int = 2018
    community_spread_m: float = 4000.0
    jitter_m: float = 400.0
    status_fraction: float = 0.5
    kernel: np.ndarray | None = None
    base_lat: float = 40.73
    base_lon: float = -74.0

    def rates(self) -> np.ndarray:
        k = self.kernel if self.kernel is not None else default_kernel(self.n_communities)
        k = np.asarray(k, dtype=np.float64)
        if k.shape != (self.n_communities, self.n_communities, 5):
            raise DataError(f"kernel must be (communities, communities, 5), got {k.shape}")
        if np.any(k < 0):
            raise DataError("kernel rates must be non-negative")
        if k.sum() == 0:
            raise DataError("kernel has zero total rate")
        return k


@dataclass
class SyntheticCity:
    scenario: SyntheticScenario
    stations: list[str]
    communities: dict[str, int]
    xy_m: np.ndarray             # planted layout in meters, (n, 2)
    trips: TripTable
    status: StatusTable
    weather: WeatherTable
    distances: DistanceMatrix

    def community_labels(self, stations: list[str] | None = None) -> np.ndarray:
        order = stations if stations is not None else self.stations
        return np.array([self.communities[s] for s in order], dtype=np.int64)


def _station_layout(scenario: SyntheticScenario, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    k = scenario.n_communities
    angles = 2.0 * np.pi * np.arange(k) / k
    centers = scenario.community_spread_m * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.arange(scenario.n_stations) * k // scenario.n_stations
    xy = centers[labels] + rng.normal(0.0, scenario.jitter_m, size=(scenario.n_stations, 2))
    return xy, labels


def _day_pools(year: int) -> tuple[np.ndarray, np.ndarray]:
    start = date_t(year, 1, 1)
    n = days_in_year(year)
    dows = np.array([(start + timedelta(days=i)).weekday() for i in range(n)])
    base = (start - date_t(1970, 1, 1)).days
    all_days = base + np.arange(n)
    return all_days[dows < 5], all_days[dows >= 5]


def generate(scenario: SyntheticScenario) -> SyntheticCity:
    """Draw a full synthetic city; deterministic for a fixed scenario."""
    rng = np.random.default_rng(scenario.seed)
    rates = scenario.rates()
    k = scenario.n_communities
    xy, labels = _station_layout(scenario, rng)
    stations = [f"S{i:04d}" for i in range(scenario.n_stations)]
    members = [np.flatnonzero(labels == c) for c in range(k)]
    if any(len(m) == 0 for m in members):
        raise DataError("every community needs at least one station")

    weekdays, weekends = _day_pools(scenario.year)
    probs = (rates / rates.sum()).reshape(-1)
    counts = rng.multinomial(scenario.n_trips, probs).reshape(rates.shape)

    start_idx_parts, end_idx_parts, start_secs_parts = [], [], []
    for c_from in range(k):
        for c_to in range(k):
            for slot in range(1, 6):
                m = int(counts[c_from, c_to, slot - 1])
                if m == 0:
                    continue
                day_class, start_hour, end_hour = SLOTS[slot]
                pool = weekdays if day_class == "weekday" else weekends
                days = pool[rng.integers(0, len(pool), size=m)]
                secs_of_day = rng.integers(start_hour * 3600, end_hour * 3600, size=m)
                start_idx_parts.append(rng.choice(members[c_from], size=m))
                end_idx_parts.append(rng.choice(members[c_to], size=m))
                start_secs_parts.append(days * 86400 + secs_of_day)

    start_idx = np.concatenate(start_idx_parts)
    end_idx = np.concatenate(end_idx_parts)
    start_secs = np.concatenate(start_secs_parts)

    dist_m = np.linalg.norm(xy[start_idx] - xy[end_idx], axis=1)
    durations = np.maximum(
        60, (dist_m / 4.0 + rng.normal(300.0, 120.0, size=len(dist_m))).astype(np.int64)
    )
    end_secs = start_secs + durations

    order = np.argsort(start_secs, kind="stable")
    start_idx, end_idx = start_idx[order], end_idx[order]
    start_secs, end_secs = start_secs[order], end_secs[order]
    durations = durations[order]

    lat = scenario.base_lat + xy[:, 1] / M_PER_DEG_LAT
    lon = scenario.base_lon + xy[:, 0] / (M_PER_DEG_LON * math.cos(math.radians(scenario.base_lat)))
    station_arr = np.array(stations, dtype=object)

    trips = TripTable(
        duration=durations,
        start_time=start_secs.astype("datetime64[s]"),
        end_time=end_secs.astype("datetime64[s]"),
        start_station=station_arr[start_idx],
        end_station=station_arr[end_idx],
        start_lat=lat[start_idx],
        start_lon=lon[start_idx],
        end_lat=lat[end_idx],
        end_lon=lon[end_idx],
    )

    status = _status_for(trips, stations, scenario, rng)
    weather = _weather_for(scenario, rng)

    d = np.sqrt(np.sum((xy[:, None, :] - xy[None, :, :]) ** 2, axis=2))
    np.fill_diagonal(d, 0.0)
    distances = DistanceMatrix(stations, d)

    return SyntheticCity(
        scenario=scenario,
        stations=stations,
        communities={s: int(c) for s, c in zip(stations, labels)},
        xy_m=xy,
        trips=trips,
        status=status,
        weather=weather,
        distances=distances,
    )


def _status_for(
    trips: TripTable,
    stations: list[str],
    scenario: SyntheticScenario,
    rng: np.random.Generator,
) -> StatusTable:
    """Daily snapshots for the first status_fraction of stations.

    The opening stock is chosen so the running balance never goes negative,
    keeping the snapshots consistent with the trip record.
    """
    n_status = int(round(scenario.status_fraction * len(stations)))
    covered = set(stations[:n_status])

    events: dict[tuple[str, int], list[tuple[int, int]]] = {}
    start_secs = trips.start_time.astype("datetime64[s]").astype("int64")
    end_secs = trips.end_time.astype("datetime64[s]").astype("int64")
    for i in range(len(trips)):
        s = trips.start_station[i]
        if s in covered:
            t = int(start_secs[i])
            events.setdefault((s, t // 86400), []).append((t, -1))
        e = trips.end_station[i]
        if e in covered:
            t = int(end_secs[i])
            events.setdefault((e, t // 86400), []).append((t, +1))

    st_station, st_time, st_count = [], [], []
    for (station, day) in sorted(events):
        day_events = sorted(events[(station, day)])
        scores = np.array([v for _, v in day_events])
        cum = np.cumsum(scores)
        stock = int(max(0, -cum.min())) + int(rng.integers(0, 4))
        base = day * 86400
        st_station.append(station)
        st_time.append(base + 300)
        st_count.append(stock)
        noon = base + 12 * 3600
        before_noon = np.searchsorted([t for t, _ in day_events], noon, side="right")
        level = stock + (int(cum[before_noon - 1]) if before_noon > 0 else 0)
        st_station.append(station)
        st_time.append(noon)
        st_count.append(level)

    return StatusTable(
        station=np.array(st_station, dtype=object),
        time=np.array(st_time, dtype=np.int64).astype("datetime64[s]"),
        bikes_available=np.array(st_count, dtype=np.int64),
    )


def _weather_for(scenario: SyntheticScenario, rng: np.random.Generator) -> WeatherTable:
    """Two-hourly observations with a seasonal temperature cycle."""
    n_days = days_in_year(scenario.year)
    base = (date_t(scenario.year, 1, 1) - date_t(1970, 1, 1)).days
    hours = np.arange(n_days * 12) * 2
    secs = base * 86400 + hours * 3600
    day_frac = hours / 24.0
    temp = 45.0 + 25.0 * np.sin(2.0 * np.pi * (day_frac - 100.0) / 365.0) + rng.normal(0, 3.0, len(hours))
    humidity = np.clip(60.0 + 15.0 * np.sin(2.0 * np.pi * day_frac / 30.0) + rng.normal(0, 8.0, len(hours)), 0, 100)
    wind = np.clip(rng.gamma(2.0, 3.0, len(hours)), 0, None)
    precip = np.where(rng.random(len(hours)) < 0.1, rng.exponential(1.5, len(hours)), 0.0)
    visibility = np.clip(10.0 - precip * 2.0 + rng.normal(0, 0.5, len(hours)), 0.1, None)
    return WeatherTable(
        time=secs.astype("datetime64[s]"),
        air_temp=np.round(temp, 2),
        rel_humidity=np.round(humidity, 2),
        wind_speed=np.round(wind, 2),
        precip_1h=np.round(precip, 2),
        visibility=np.round(visibility, 2),
    )


def write_city(city: SyntheticCity, outdir: str | Path) -> dict[str, Path]:
    """Write the city in the file layouts the ingest module reads."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "trips": outdir / "trips.csv",
        "status": outdir / "status.csv",
        "weather": outdir / "weather.csv",
        "distances": outdir / "distances.csv",
        "communities": outdir / "communities.csv",
    }
    city.trips.write_csv(paths["trips"])
    city.status.write_csv(paths["status"])
    city.weather.write_csv(paths["weather"])
    city.distances.write_csv(paths["distances"])
    with open(paths["communities"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station id", "community"])
        for s in city.stations:
            w.writerow([s, city.communities[s]])
    return paths


def planted_partition_graph(
    n_nodes: int,
    n_communities: int,
    p_in: float,
    p_out: float,
    seed: int,
) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Undirected planted-partition graph: edges and community labels.

    Communities are contiguous, near-equal blocks; each unordered pair gets
    an independent edge with probability p_in inside a community and p_out
    across.
    """
    if not (0 <= p_out <= p_in <= 1):
        raise DataError("need 0 <= p_out <= p_in <= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_nodes) * n_communities // n_nodes
    iu, ju = np.triu_indices(n_nodes, k=1)
    p = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < p
    edges = [(int(u), int(v)) for u, v in zip(iu[keep], ju[keep])]
    return edges, labels


def community_feature_matrix(
    labels: np.ndarray,
    seed: int,
    with_cluster_id: bool = True,
    noise: float = 2.0,
    proto_scale: float = 0.5,
) -> np.ndarray:
    """Node features in the standard layout, correlated with community.

    Layout: optional cluster id, then a 20-entry weather-average block, a
    7-bin weekday histogram, and a 6-bin period histogram (histogram blocks
    each sum to one). The non-cluster blocks carry a deliberately noisy
    community signal so the cluster id column stays informative.
    """
    rng = np.random.default_rng(seed)
    n = len(labels)
    k = int(labels.max()) + 1
    weather_proto = rng.normal(0.0, proto_scale, size=(k, 20))
    weekday_proto = rng.normal(0.0, proto_scale, size=(k, 7))
    period_proto = rng.normal(0.0, proto_scale, size=(k, 6))

    def softmax(z):
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    weather = weather_proto[labels] + rng.normal(0.0, noise, size=(n, 20))
    weekday = softmax(weekday_proto[labels] + rng.normal(0.0, noise, size=(n, 7)))
    period = softmax(period_proto[labels] + rng.normal(0.0, noise, size=(n, 6)))
    blocks = [weather, weekday, period]
    if with_cluster_id:
        blocks.insert(0, labels.astype(np.float64)[:, None])
    return np.concatenate(blocks, axis=1)
