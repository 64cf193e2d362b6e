"""File ingestion: trips, station status, weather, and pairwise distances.

All readers take delimiter-separated text with a header row, validate each
row, and return an immutable table plus a reject report. Column names are
remappable through a schema map; the defaults match the public 2018
CitiBike trip file layout.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError

# Default column-name maps (logical field -> file column).
TRIP_SCHEMA = {
    "duration": "tripduration",
    "start_time": "starttime",
    "end_time": "stoptime",
    "start_station": "start station id",
    "end_station": "end station id",
    "start_lat": "start station latitude",
    "start_lon": "start station longitude",
    "end_lat": "end station latitude",
    "end_lon": "end station longitude",
}

STATUS_SCHEMA = {
    "station": "station id",
    "time": "time",
    "bikes_available": "bikes available",
}

WEATHER_SCHEMA = {
    "time": "time",
    "air_temp": "air temp",
    "rel_humidity": "relative humidity",
    "wind_speed": "wind speed",
    "precip_1h": "precip 1h",
    "visibility": "visibility",
}

_TIME_FORMATS = (
    "%Y-%m-%d %H:%M:%S.%f",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
)


def parse_timestamp(text: str) -> datetime | None:
    """Parse a timestamp string in any supported layout, or None."""
    text = text.strip()
    for fmt in _TIME_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    return None


def _to_dt64(dt: datetime) -> np.datetime64:
    return np.datetime64(dt.replace(microsecond=0), "s")


@dataclass(frozen=True)
class RejectReport:
    """Rows dropped during parsing, with the data line number and reason."""

    rows: list[tuple[int, str]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.rows)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line_no, reason in self.rows:
                fh.write(f"{line_no}\t{reason}\n")


@dataclass(frozen=True)
class TripTable:
    duration: np.ndarray      # seconds, int64
    start_time: np.ndarray    # datetime64[s]
    end_time: np.ndarray      # datetime64[s]
    start_station: np.ndarray
    end_station: np.ndarray
    start_lat: np.ndarray
    start_lon: np.ndarray
    end_lat: np.ndarray
    end_lon: np.ndarray

    def __len__(self) -> int:
        return len(self.duration)

    def subset(self, mask: np.ndarray) -> "TripTable":
        return TripTable(*(getattr(self, f)[mask] for f in _TRIP_FIELDS))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(TRIP_SCHEMA[f] for f in _TRIP_FIELDS)
            for i in range(len(self)):
                w.writerow(
                    [
                        int(self.duration[i]),
                        _fmt_time(self.start_time[i]),
                        _fmt_time(self.end_time[i]),
                        self.start_station[i],
                        self.end_station[i],
                        _fmt_float(self.start_lat[i]),
                        _fmt_float(self.start_lon[i]),
                        _fmt_float(self.end_lat[i]),
                        _fmt_float(self.end_lon[i]),
                    ]
                )


_TRIP_FIELDS = (
    "duration",
    "start_time",
    "end_time",
    "start_station",
    "end_station",
    "start_lat",
    "start_lon",
    "end_lat",
    "end_lon",
)


@dataclass(frozen=True)
class StatusTable:
    station: np.ndarray
    time: np.ndarray          # datetime64[s]
    bikes_available: np.ndarray

    def __len__(self) -> int:
        return len(self.station)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(STATUS_SCHEMA[f] for f in ("station", "time", "bikes_available"))
            for i in range(len(self)):
                w.writerow([self.station[i], _fmt_time(self.time[i]), int(self.bikes_available[i])])


@dataclass(frozen=True)
class WeatherTable:
    """Weather observations; missing numeric values are stored as NaN."""

    time: np.ndarray          # datetime64[s]
    air_temp: np.ndarray
    rel_humidity: np.ndarray
    wind_speed: np.ndarray
    precip_1h: np.ndarray
    visibility: np.ndarray

    def __len__(self) -> int:
        return len(self.time)

    def variables(self) -> dict[str, np.ndarray]:
        return {
            "air_temp": self.air_temp,
            "rel_humidity": self.rel_humidity,
            "wind_speed": self.wind_speed,
            "precip_1h": self.precip_1h,
            "visibility": self.visibility,
        }

    def write_csv(self, path: str | Path) -> None:
        names = ("time", "air_temp", "rel_humidity", "wind_speed", "precip_1h", "visibility")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(WEATHER_SCHEMA[f] for f in names)
            for i in range(len(self)):
                row = [_fmt_time(self.time[i])]
                for f in names[1:]:
                    v = getattr(self, f)[i]
                    row.append("" if math.isnan(v) else _fmt_float(v))
                w.writerow(row)


@dataclass(frozen=True)
class DistanceMatrix:
    """Directed pairwise distances in meters; entry (h, k) is station h -> k."""

    stations: list[str]
    d: np.ndarray

    def __len__(self) -> int:
        return len(self.stations)

    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.stations)}

    def submatrix(self, stations: list[str]) -> "DistanceMatrix":
        idx = self.index()
        missing = [s for s in stations if s not in idx]
        if missing:
            raise DataError(f"distance matrix lacks {len(missing)} stations, e.g. {missing[:3]}")
        sel = np.array([idx[s] for s in stations])
        return DistanceMatrix(list(stations), self.d[np.ix_(sel, sel)].copy())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["station"] + self.stations)
            for i, s in enumerate(self.stations):
                w.writerow([s] + [_fmt_float(v) for v in self.d[i]])


@dataclass(frozen=True)
class StationSet:
    """Stations surviving the activity filter, with coordinates and counts."""

    stations: list[str]
    coords: dict[str, tuple[float, float]]
    trip_counts: dict[str, int]
    min_trips: int

    def __len__(self) -> int:
        return len(self.stations)

    def __contains__(self, station: str) -> bool:
        return station in self.trip_counts


def _fmt_time(t: np.datetime64) -> str:
    return str(t.astype("datetime64[s]")).replace("T", " ")


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _open_rows(path: str | Path, delimiter: str):
    fh = open(path, "r", newline="", encoding="utf-8")
    return fh, csv.reader(fh, delimiter=delimiter)


def _header_index(header: list[str], schema: dict[str, str], table: str) -> dict[str, int]:
    pos = {name.strip(): i for i, name in enumerate(header)}
    out = {}
    for logical, column in schema.items():
        if column not in pos:
            raise SchemaError(f"{table} file is missing column {column!r} (for field {logical!r})")
        out[logical] = pos[column]
    return out


def parse_trips(
    path: str | Path,
    schema: dict[str, str] | None = None,
    delimiter: str = ",",
) -> tuple[TripTable, RejectReport]:
    """Read a trip file, dropping rows that fail validation.

    A row is kept when the duration is a positive integer, both timestamps
    parse with end >= start, both station ids are non-empty, and the
    coordinates are finite and inside valid latitude/longitude ranges.
    """
    colmap = dict(TRIP_SCHEMA)
    if schema:
        colmap.update(schema)
    rejects: list[tuple[int, str]] = []
    cols: dict[str, list] = {f: [] for f in _TRIP_FIELDS}

    fh, reader = _open_rows(path, delimiter)
    with fh:
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, header row required")
        idx = _header_index(header, colmap, "trips")
        width = max(idx.values()) + 1
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < width:
                rejects.append((line_no, "short row"))
                continue
            reason = _validate_trip_row(row, idx, cols)
            if reason:
                rejects.append((line_no, reason))

    table = TripTable(
        duration=np.array(cols["duration"], dtype=np.int64),
        start_time=np.array(cols["start_time"], dtype="datetime64[s]"),
        end_time=np.array(cols["end_time"], dtype="datetime64[s]"),
        start_station=np.array(cols["start_station"], dtype=object),
        end_station=np.array(cols["end_station"], dtype=object),
        start_lat=np.array(cols["start_lat"], dtype=np.float64),
        start_lon=np.array(cols["start_lon"], dtype=np.float64),
        end_lat=np.array(cols["end_lat"], dtype=np.float64),
        end_lon=np.array(cols["end_lon"], dtype=np.float64),
    )
    return table, RejectReport(rejects)


def _validate_trip_row(row, idx, cols) -> str | None:
    try:
        duration = int(float(row[idx["duration"]]))
    except ValueError:
        return "unparseable duration"
    if duration <= 0:
        return "non-positive duration"
    start = parse_timestamp(row[idx["start_time"]])
    if start is None:
        return "unparseable start time"
    end = parse_timestamp(row[idx["end_time"]])
    if end is None:
        return "unparseable end time"
    if end < start:
        return "end time before start time"
    s_id = row[idx["start_station"]].strip()
    e_id = row[idx["end_station"]].strip()
    if not s_id or not e_id:
        return "empty station id"
    try:
        lats = (float(row[idx["start_lat"]]), float(row[idx["end_lat"]]))
        lons = (float(row[idx["start_lon"]]), float(row[idx["end_lon"]]))
    except ValueError:
        return "unparseable coordinate"
    if not all(math.isfinite(v) and -90.0 <= v <= 90.0 for v in lats):
        return "latitude out of range"
    if not all(math.isfinite(v) and -180.0 <= v <= 180.0 for v in lons):
        return "longitude out of range"

    cols["duration"].append(duration)
    cols["start_time"].append(_to_dt64(start))
    cols["end_time"].append(_to_dt64(end))
    cols["start_station"].append(s_id)
    cols["end_station"].append(e_id)
    cols["start_lat"].append(lats[0])
    cols["start_lon"].append(lons[0])
    cols["end_lat"].append(lats[1])
    cols["end_lon"].append(lons[1])
    return None


def parse_status(
    path: str | Path,
    schema: dict[str, str] | None = None,
    delimiter: str = ",",
) -> tuple[StatusTable, RejectReport]:
    """Read station status snapshots (absolute bike counts at timestamps)."""
    colmap = dict(STATUS_SCHEMA)
    if schema:
        colmap.update(schema)
    rejects: list[tuple[int, str]] = []
    stations, times, counts = [], [], []

    fh, reader = _open_rows(path, delimiter)
    with fh:
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, header row required")
        idx = _header_index(header, colmap, "status")
        width = max(idx.values()) + 1
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < width:
                rejects.append((line_no, "short row"))
                continue
            station = row[idx["station"]].strip()
            if not station:
                rejects.append((line_no, "empty station id"))
                continue
            t = parse_timestamp(row[idx["time"]])
            if t is None:
                rejects.append((line_no, "unparseable timestamp"))
                continue
            try:
                n = int(float(row[idx["bikes_available"]]))
            except ValueError:
                rejects.append((line_no, "unparseable bike count"))
                continue
            if n < 0:
                rejects.append((line_no, "negative bike count"))
                continue
            stations.append(station)
            times.append(_to_dt64(t))
            counts.append(n)

    table = StatusTable(
        station=np.array(stations, dtype=object),
        time=np.array(times, dtype="datetime64[s]"),
        bikes_available=np.array(counts, dtype=np.int64),
    )
    return table, RejectReport(rejects)


_WEATHER_BOUNDS = {
    "rel_humidity": (0.0, 100.0),
    "wind_speed": (0.0, math.inf),
    "precip_1h": (0.0, math.inf),
    "visibility": (0.0, math.inf),
}


def parse_weather(
    path: str | Path,
    schema: dict[str, str] | None = None,
    delimiter: str = ",",
) -> tuple[WeatherTable, RejectReport]:
    """Read weather observations; empty numeric fields become NaN (missing)."""
    colmap = dict(WEATHER_SCHEMA)
    if schema:
        colmap.update(schema)
    rejects: list[tuple[int, str]] = []
    names = ("air_temp", "rel_humidity", "wind_speed", "precip_1h", "visibility")
    cols: dict[str, list] = {f: [] for f in ("time",) + names}

    fh, reader = _open_rows(path, delimiter)
    with fh:
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, header row required")
        idx = _header_index(header, colmap, "weather")
        width = max(idx.values()) + 1
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < width:
                rejects.append((line_no, "short row"))
                continue
            t = parse_timestamp(row[idx["time"]])
            if t is None:
                rejects.append((line_no, "unparseable timestamp"))
                continue
            values = {}
            reason = None
            for f in names:
                raw = row[idx[f]].strip()
                if raw == "":
                    values[f] = math.nan
                    continue
                try:
                    v = float(raw)
                except ValueError:
                    reason = f"unparseable {f}"
                    break
                if not math.isfinite(v):
                    reason = f"non-finite {f}"
                    break
                lo, hi = _WEATHER_BOUNDS.get(f, (-math.inf, math.inf))
                if not lo <= v <= hi:
                    reason = f"{f} out of range"
                    break
                values[f] = v
            if reason:
                rejects.append((line_no, reason))
                continue
            cols["time"].append(_to_dt64(t))
            for f in names:
                cols[f].append(values[f])

    table = WeatherTable(
        time=np.array(cols["time"], dtype="datetime64[s]"),
        **{f: np.array(cols[f], dtype=np.float64) for f in names},
    )
    return table, RejectReport(rejects)


def parse_distances(path: str | Path, delimiter: str = ",") -> DistanceMatrix:
    """Read a square pairwise-distance matrix in meters.

    The header row lists station ids; each data row starts with the origin
    station id. A non-square matrix is fatal. Nonzero diagonal entries are
    coerced to zero with a warning.
    """
    fh, reader = _open_rows(path, delimiter)
    with fh:
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, header row required")
        col_stations = [c.strip() for c in header[1:]]
        row_stations: list[str] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            row_stations.append(row[0].strip())
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: unparseable distance entry: {exc}") from exc

    if len(row_stations) != len(col_stations):
        raise DataError(
            f"distance matrix is not square: {len(row_stations)} rows, {len(col_stations)} columns"
        )
    if row_stations != col_stations:
        raise DataError("distance matrix row and column station orders differ")
    d = np.array(rows, dtype=np.float64)
    if d.shape != (len(row_stations), len(col_stations)):
        raise DataError("distance matrix has ragged rows")
    if not np.all(np.isfinite(d)):
        raise DataError("distance matrix has non-finite entries")
    if np.any(d < 0):
        raise DataError("distance matrix has negative entries")
    diag = np.diagonal(d)
    if np.any(diag != 0):
        warnings.warn(f"{int(np.sum(diag != 0))} nonzero diagonal distances coerced to 0")
        np.fill_diagonal(d, 0.0)
    return DistanceMatrix(row_stations, d)


def stations_missing_coordinates(dm: DistanceMatrix, coords: dict[str, tuple[float, float]]) -> list[str]:
    """Stations present in the distance matrix but without known coordinates."""
    return [s for s in dm.stations if s not in coords]


def days_in_year(year: int) -> int:
    leap = year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)
    return 366 if leap else 365


def activity_threshold(year: int) -> int:
    """Minimum annual trip endpoints a station must have to be retained."""
    return math.ceil(days_in_year(year) / 2)


def filter_stations(
    trips: TripTable,
    year: int,
    min_trips: int | None = None,
) -> tuple[StationSet, TripTable]:
    """Drop low-activity stations and the trips touching them.

    A station's count is the number of trips starting there plus the number
    ending there (one per endpoint). Stations below the threshold are
    removed, then trips with a removed endpoint are dropped. Filtering is
    idempotent for a fixed threshold.
    """
    if len(trips) == 0:
        raise DataError("cannot filter an empty trip table")
    threshold = activity_threshold(year) if min_trips is None else min_trips

    counts: dict[str, int] = {}
    for arr in (trips.start_station, trips.end_station):
        ids, n = np.unique(arr.astype(str), return_counts=True)
        for s, c in zip(ids, n):
            counts[s] = counts.get(s, 0) + int(c)

    kept = {s for s, c in counts.items() if c >= threshold}
    if not kept:
        raise DataError(
            f"all {len(counts)} stations fall below the activity threshold ({threshold})"
        )

    keep_mask = np.array(
        [s in kept and e in kept for s, e in zip(trips.start_station, trips.end_station)],
        dtype=bool,
    )
    filtered = trips.subset(keep_mask)

    coords: dict[str, tuple[float, float]] = {}
    sums: dict[str, list[float]] = {}
    for s, lat, lon in zip(trips.start_station, trips.start_lat, trips.start_lon):
        if s in kept:
            acc = sums.setdefault(s, [0.0, 0.0, 0])
            acc[0] += lat
            acc[1] += lon
            acc[2] += 1
    for s, lat, lon in zip(trips.end_station, trips.end_lat, trips.end_lon):
        if s in kept:
            acc = sums.setdefault(s, [0.0, 0.0, 0])
            acc[0] += lat
            acc[1] += lon
            acc[2] += 1
    for s, (lat_sum, lon_sum, n) in sums.items():
        coords[s] = (lat_sum / n, lon_sum / n)

    station_set = StationSet(
        stations=sorted(kept),
        coords=coords,
        trip_counts={s: counts[s] for s in sorted(kept)},
        min_trips=threshold,
    )
    return station_set, filtered
