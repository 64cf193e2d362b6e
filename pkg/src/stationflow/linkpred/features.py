"""Node feature vectors for the transition graph.

Each station gets, in order: its cluster id (omitted for the
no-clustering variant), the averages of five weather variables at its
departure timestamps in each of the four meteorological seasons, a 7-bin
weekday-of-departure histogram, and a 6-bin time-period-of-departure
histogram. With the cluster id the vector has 34 entries, without it 33.
"""

from __future__ import annotations

import numpy as np

from ..ingest import TripTable, WeatherTable

WEATHER_VARS = ("air_temp", "rel_humidity", "wind_speed", "precip_1h", "visibility")
SEASON_NAMES = ("spring", "summer", "autumn", "winter")

# Month -> season index: Mar-May spring, Jun-Aug summer, Sep-Nov autumn,
# Dec-Feb winter.
_MONTH_SEASON = np.array([3, 3, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3])

def season_of_month(month: int) -> int:
    return int(_MONTH_SEASON[month - 1])


def _season_index(times: np.ndarray) -> np.ndarray:
    months = times.astype("datetime64[M]").astype(int) % 12  # 0 = January
    return _MONTH_SEASON[months]


def _period_index(times: np.ndarray) -> np.ndarray:
    hours = (times.astype("datetime64[s]").astype("int64") % 86400) // 3600
    out = np.empty(len(hours), dtype=np.int64)
    out[(hours >= 7) & (hours < 11)] = 0
    out[(hours >= 11) & (hours < 15)] = 1
    out[(hours >= 15) & (hours < 19)] = 2
    out[(hours >= 19) & (hours < 23)] = 3
    out[(hours >= 23) | (hours < 3)] = 4
    out[(hours >= 3) & (hours < 7)] = 5
    return out


def _weekday_index(times: np.ndarray) -> np.ndarray:
    days = times.astype("datetime64[s]").astype("int64") // 86400
    return (days + 3) % 7  # 0 = Monday


def weather_as_of(weather: WeatherTable, times: np.ndarray) -> np.ndarray:
    """Index of the last weather record at or before each timestamp."""
    if len(weather) == 0:
        raise ValueError("weather table is empty")
    order = np.argsort(weather.time, kind="stable")
    sorted_times = weather.time[order]
    idx = np.searchsorted(sorted_times, times.astype(sorted_times.dtype), side="right") - 1
    np.clip(idx, 0, None, out=idx)
    return order[idx]


def seasonal_averages(weather: WeatherTable) -> np.ndarray:
    """City-wide (4 seasons x 5 variables) means; missing values excluded.

    A season with no usable records falls back to the variable's overall
    mean, then to zero when the variable is entirely missing.
    """
    seasons = _season_index(weather.time)
    out = np.zeros((4, len(WEATHER_VARS)))
    values = weather.variables()
    for j, var in enumerate(WEATHER_VARS):
        v = values[var]
        ok = ~np.isnan(v)
        overall = float(v[ok].mean()) if ok.any() else 0.0
        for s in range(4):
            mask = ok & (seasons == s)
            out[s, j] = float(v[mask].mean()) if mask.any() else overall
    return out


def node_feature_matrix(
    stations: list[str],
    trips: TripTable,
    weather: WeatherTable,
    cluster_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, list[str]]:
    """Raw (unstandardized) feature matrix plus stations that needed the
    city-wide weather fallback because they have no departures."""
    n = len(stations)
    pos = {s: i for i, s in enumerate(stations)}
    if cluster_ids is not None and len(cluster_ids) != n:
        raise ValueError("cluster id array does not match the station order")

    start_rows = np.array([pos.get(s, -1) for s in trips.start_station], dtype=np.int64)
    keep = start_rows >= 0
    start_rows = start_rows[keep]
    dep_times = trips.start_time[keep]

    dep_season = _season_index(dep_times)
    dep_weekday = _weekday_index(dep_times)
    dep_period = _period_index(dep_times)
    w_idx = weather_as_of(weather, dep_times)

    weekday_hist = np.zeros((n, 7))
    np.add.at(weekday_hist, (start_rows, dep_weekday), 1.0)
    period_hist = np.zeros((n, 6))
    np.add.at(period_hist, (start_rows, dep_period), 1.0)
    for hist in (weekday_hist, period_hist):
        sums = hist.sum(axis=1, keepdims=True)
        np.divide(hist, sums, out=hist, where=sums > 0)

    city = seasonal_averages(weather)
    weather_block = np.zeros((n, 4, len(WEATHER_VARS)))
    sums = np.zeros((n, 4, len(WEATHER_VARS)))
    counts = np.zeros((n, 4, len(WEATHER_VARS)))
    values = weather.variables()
    for j, var in enumerate(WEATHER_VARS):
        v = values[var][w_idx]
        ok = ~np.isnan(v)
        np.add.at(sums[:, :, j], (start_rows[ok], dep_season[ok]), v[ok])
        np.add.at(counts[:, :, j], (start_rows[ok], dep_season[ok]), 1.0)
    have = counts > 0
    weather_block[have] = sums[have] / counts[have]
    weather_block[~have] = np.broadcast_to(city, weather_block.shape)[~have]

    no_departures = sorted(set(stations) - set(np.array(stations, dtype=object)[np.unique(start_rows)]))
    blocks = [weather_block.reshape(n, -1), weekday_hist, period_hist]
    if cluster_ids is not None:
        blocks.insert(0, np.asarray(cluster_ids, dtype=np.float64)[:, None])
    return np.concatenate(blocks, axis=1), no_departures


def standardize_features(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean unit-variance columns; constant columns become zero.

    Returns (standardized, means, stds); stds keep 0.0 for constant columns
    so the same transform can be replayed on new nodes.
    """
    means = matrix.mean(axis=0)
    stds = matrix.std(axis=0)
    return apply_standardization(matrix, means, stds), means, stds


def apply_standardization(matrix: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    out = np.zeros_like(matrix, dtype=np.float64)
    ok = stds > 0
    out[:, ok] = (matrix[:, ok] - means[ok]) / stds[ok]
    return out
