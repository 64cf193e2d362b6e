"""Check-out demand estimation from trips and station status.

Availability at a station is reconstructed per (station, date) by merging
status snapshots (absolute counts) with trip events scored -1 for a rent
and +1 for a return. Stations without status data fall back to the offset
method: the cumulative trip balance shifted up by the magnitude of its most
negative value. Per-period uptime (minutes with bikes available) and rent
counts then yield each station's average check-out rate per time slot and
its normalized check-out profile.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import dataclass
from datetime import date as date_t, timedelta
from pathlib import Path

import numpy as np

from .ingest import StatusTable, TripTable, days_in_year

# Five fixed daily windows: (day class, start hour, end hour), end exclusive.
SLOTS: dict[int, tuple[str, int, int]] = {
    1: ("weekday", 7, 11),
    2: ("weekday", 12, 16),
    3: ("weekday", 17, 22),
    4: ("weekend", 9, 17),
    5: ("weekend", 18, 23),
}

WEEKDAY_SLOTS = (1, 2, 3)
WEEKEND_SLOTS = (4, 5)

PERIOD_MINUTES = 60.0


def periods_in_slot(slot: int) -> int:
    _, start, end = SLOTS[slot]
    return end - start


def slots_for_day_class(weekend: bool) -> tuple[int, ...]:
    return WEEKEND_SLOTS if weekend else WEEKDAY_SLOTS


def assign_time_slot(ts) -> int | None:
    """Slot id (1..5) containing the timestamp, or None outside all windows."""
    if isinstance(ts, np.datetime64):
        secs = int(ts.astype("datetime64[s]").astype("int64"))
        day = secs // 86400
        hour = (secs % 86400) // 3600
        weekend = (day + 3) % 7 >= 5
    else:
        hour = ts.hour
        weekend = ts.weekday() >= 5
    for slot in slots_for_day_class(weekend):
        _, start, end = SLOTS[slot]
        if start <= hour < end:
            return slot
    return None


def assign_time_slots(times: np.ndarray) -> np.ndarray:
    """Vectorized slot assignment; 0 marks timestamps outside all windows."""
    secs = times.astype("datetime64[s]").astype("int64")
    hour = (secs % 86400) // 3600
    weekend = (secs // 86400 + 3) % 7 >= 5
    out = np.zeros(len(times), dtype=np.int8)
    for slot, (day_class, start, end) in SLOTS.items():
        mask = (hour >= start) & (hour < end) & (weekend if day_class == "weekend" else ~weekend)
        out[mask] = slot
    return out


def weekday_weekend_counts(year: int) -> tuple[int, int]:
    """(number of weekdays, number of weekend days) in the calendar year."""
    n = days_in_year(year)
    start = date_t(year, 1, 1)
    weekend = sum(1 for i in range(n) if (start + timedelta(days=i)).weekday() >= 5)
    return n - weekend, weekend


@dataclass
class AvailabilitySeries:
    """Piecewise-constant bike availability on one date.

    ``values[i]`` holds from ``times[i]`` (inclusive) to the next event.
    ``initial`` is the level in force before the first event; None means
    unknown, which downstream consumers treat as zero.
    """

    station: str
    date: date_t
    times: list[int]          # seconds since epoch, strictly increasing
    values: list[int]
    initial: int | None
    clamped: int = 0

    def __len__(self) -> int:
        return len(self.times)


# Event kinds, in application order at equal timestamps: a status snapshot
# overrides the running balance first, then returns, then rents.
_K_STATUS, _K_RETURN, _K_RENT = 0, 1, 2


def _merge_events(times: list[int], kinds: list[int], values: list[int]):
    order = sorted(range(len(times)), key=lambda i: (times[i], kinds[i]))
    return [(times[order[i]], kinds[order[i]], values[order[i]]) for i in range(len(order))]


def offset_availability(
    events: list[tuple[int, int]],
    station: str = "",
    date: date_t | None = None,
) -> AvailabilitySeries:
    """Availability from balance events alone via the offset method.

    The cumulative sum of the +-1 scores is shifted up by the absolute value
    of its minimum (when negative), so the result is non-negative everywhere
    and touches zero whenever the raw cumulative minimum was <= 0.
    """
    if not events:
        return AvailabilitySeries(station, date or date_t(1970, 1, 1), [], [], None)
    times = [t for t, _ in events]
    if any(times[i] > times[i + 1] for i in range(len(times) - 1)):
        raise ValueError("balance events must be time-ordered")
    cum = np.cumsum([s for _, s in events])
    offset = int(max(0, -cum.min()))
    values = (cum + offset).tolist()
    out_times, out_values = _collapse_equal_times(times, values)
    return AvailabilitySeries(station, date or date_t(1970, 1, 1), out_times, out_values, offset)


def _collapse_equal_times(times: list[int], values: list[int]):
    """Keep only the last value for runs of equal timestamps."""
    out_t: list[int] = []
    out_v: list[int] = []
    for t, v in zip(times, values):
        if out_t and out_t[-1] == t:
            out_v[-1] = v
        else:
            out_t.append(t)
            out_v.append(v)
    return out_t, out_v


def _anchored_availability(
    merged: list[tuple[int, int, int]],
    station: str,
    date: date_t,
) -> AvailabilitySeries:
    """Availability when at least one status snapshot anchors the balance."""
    first_snap = next(i for i, (_, kind, _) in enumerate(merged) if kind == _K_STATUS)
    n = len(merged)
    levels = [0] * n
    clamped = 0

    # Forward from the first snapshot: snapshots re-anchor, trips add +-1.
    level = 0
    for i in range(first_snap, n):
        _, kind, value = merged[i]
        if kind == _K_STATUS:
            level = value
        else:
            level += value
            if level < 0:
                level = 0
                clamped += 1
        levels[i] = level

    # Backward continuity for events before the first snapshot: the level
    # after the last prefix event is the snapshot value.
    level = merged[first_snap][2]
    for i in range(first_snap - 1, -1, -1):
        levels[i] = level
        level -= merged[i][2]
    initial = level
    if initial < 0:
        initial = 0
        clamped += 1
    for i in range(first_snap):
        if levels[i] < 0:
            levels[i] = 0
            clamped += 1

    times = [t for t, _, _ in merged]
    out_times, out_values = _collapse_equal_times(times, levels)
    return AvailabilitySeries(station, date, out_times, out_values, initial, clamped)


def reconstruct_availability(
    trips: TripTable,
    status: StatusTable,
    station: str,
    date: date_t,
) -> AvailabilitySeries:
    """Availability series for one station and date.

    With status snapshots present the snapshots are authoritative and the
    trip balance is re-anchored at each one; without any, the offset method
    is applied to the trip balance alone.
    """
    day = np.datetime64(date, "D")
    times: list[int] = []
    kinds: list[int] = []
    values: list[int] = []

    rent_mask = (trips.start_station == station) & (trips.start_time.astype("datetime64[D]") == day)
    for t in trips.start_time[rent_mask]:
        times.append(int(t.astype("int64")))
        kinds.append(_K_RENT)
        values.append(-1)
    ret_mask = (trips.end_station == station) & (trips.end_time.astype("datetime64[D]") == day)
    for t in trips.end_time[ret_mask]:
        times.append(int(t.astype("int64")))
        kinds.append(_K_RETURN)
        values.append(1)
    snap_mask = (status.station == station) & (status.time.astype("datetime64[D]") == day)
    has_status = bool(np.any(snap_mask))
    for t, n in zip(status.time[snap_mask], status.bikes_available[snap_mask]):
        times.append(int(t.astype("int64")))
        kinds.append(_K_STATUS)
        values.append(int(n))

    merged = _merge_events(times, kinds, values)
    if not has_status:
        return offset_availability([(t, v) for t, _, v in merged], station, date)
    return _anchored_availability(merged, station, date)


def uptime_minutes(series: AvailabilitySeries, window_start: int, window_end: int) -> float:
    """Minutes inside [window_start, window_end) with availability above zero.

    Window bounds are seconds since epoch. The level in force at the window
    start is the last event at or before it, falling back to the series'
    initial level (unknown counts as zero).
    """
    times, values = series.times, series.values
    i = bisect_right(times, window_start) - 1
    if i >= 0:
        level = values[i]
    else:
        level = series.initial if series.initial is not None else 0
    pos = i + 1
    acc = 0
    prev = window_start
    while pos < len(times) and times[pos] < window_end:
        if level > 0:
            acc += times[pos] - prev
        prev = times[pos]
        level = values[pos]
        pos += 1
    if level > 0:
        acc += window_end - prev
    return acc / 60.0


def period_window(date: date_t, slot: int, period: int) -> tuple[int, int]:
    """Epoch-second bounds of the 60-minute period inside a slot window."""
    _, start_hour, end_hour = SLOTS[slot]
    if not 0 <= period < end_hour - start_hour:
        raise ValueError(f"slot {slot} has {end_hour - start_hour} periods, got index {period}")
    base = int(np.datetime64(date, "s").astype("int64"))
    a = base + (start_hour + period) * 3600
    return a, a + 3600


def estimate_period_uptime(series: AvailabilitySeries, slot: int, period: int) -> float:
    """Uptime minutes for one period of a slot on the series' date."""
    a, b = period_window(series.date, slot, period)
    return uptime_minutes(series, a, b)


def average_uptime(
    per_date: dict[date_t, dict[tuple[int, int], float]],
    year: int,
) -> dict[tuple[int, int], float]:
    """Per-(slot, period) mean uptime over the whole year.

    Dates with no data contribute zero to the numerator but the denominator
    is always the full count of weekdays (slots 1-3) or weekend days
    (slots 4-5) in the year.
    """
    n_weekday, n_weekend = weekday_weekend_counts(year)
    sums: dict[tuple[int, int], float] = {}
    for day, values in per_date.items():
        weekend = day.weekday() >= 5
        for (slot, period), minutes in values.items():
            if (slot in WEEKEND_SLOTS) != weekend:
                raise ValueError(f"slot {slot} uptime reported on a {'weekend' if weekend else 'weekday'} date")
            sums[(slot, period)] = sums.get((slot, period), 0.0) + minutes
    out: dict[tuple[int, int], float] = {}
    for slot in SLOTS:
        denom = n_weekday if slot in WEEKDAY_SLOTS else n_weekend
        for period in range(periods_in_slot(slot)):
            out[(slot, period)] = sums.get((slot, period), 0.0) / denom
    return out


def checkout_rate(r_bar: float, tl_bar: float, period_minutes: float = PERIOD_MINUTES) -> float:
    """Average check-outs per period, scaled up for time without bikes.

    A station whose average stocked time is zero never had bikes to rent,
    so its rate is zero rather than a division error.
    """
    if tl_bar == 0:
        return 0.0
    return (period_minutes / tl_bar) * r_bar


def checkout_profile(u_hat: np.ndarray) -> np.ndarray:
    """Normalize the 5 check-out rates within weekday and weekend groups.

    Entries 1-3 are divided by their sum, entries 4-5 by theirs; a zero
    group sum yields zeros for that group.
    """
    u_hat = np.asarray(u_hat, dtype=np.float64)
    if u_hat.shape != (5,):
        raise ValueError("expected 5 check-out rates")
    out = np.zeros(5)
    wd = u_hat[:3].sum()
    if wd > 0:
        out[:3] = u_hat[:3] / wd
    we = u_hat[3:].sum()
    if we > 0:
        out[3:] = u_hat[3:] / we
    return out


@dataclass(frozen=True)
class CheckOutProfile:
    station: str
    u_hat: np.ndarray   # average check-outs per slot, 5 entries
    profile: np.ndarray  # group-normalized u_hat, 5 entries
    r_bar: np.ndarray   # average rents per period per slot
    tl_bar: np.ndarray  # average stocked minutes per period per slot


@dataclass
class DemandDiagnostics:
    clamped_events: int = 0
    stations_without_status: int = 0
    station_days: int = 0


def _events_by_station_day(trips: TripTable, status: StatusTable, stations: set[str]):
    """Group rent/return/status events into per-(station, day) lists."""
    groups: dict[tuple[str, int], list[tuple[int, int, int]]] = {}

    def add(station, secs, kind, value):
        key = (station, secs // 86400)
        groups.setdefault(key, []).append((secs, kind, value))

    start_secs = trips.start_time.astype("datetime64[s]").astype("int64")
    end_secs = trips.end_time.astype("datetime64[s]").astype("int64")
    for i in range(len(trips)):
        s = trips.start_station[i]
        if s in stations:
            add(s, int(start_secs[i]), _K_RENT, -1)
        e = trips.end_station[i]
        if e in stations:
            add(e, int(end_secs[i]), _K_RETURN, +1)
    status_secs = status.time.astype("datetime64[s]").astype("int64")
    for i in range(len(status)):
        s = status.station[i]
        if s in stations:
            add(s, int(status_secs[i]), _K_STATUS, int(status.bikes_available[i]))
    return groups


def checkout_profiles(
    trips: TripTable,
    status: StatusTable,
    year: int,
    stations: list[str],
) -> tuple[list[CheckOutProfile], DemandDiagnostics]:
    """Estimate every station's check-out rates and normalized profile."""
    station_list = list(stations)
    station_pos = {s: i for i, s in enumerate(station_list)}
    n = len(station_list)
    n_weekday, n_weekend = weekday_weekend_counts(year)
    denom = {slot: (n_weekday if slot in WEEKDAY_SLOTS else n_weekend) for slot in SLOTS}

    # Rent counts per (station, slot): vectorized over all trips.
    rent_totals = np.zeros((n, 6))
    slot_ids = assign_time_slots(trips.start_time)
    for i in range(len(trips)):
        s = trips.start_station[i]
        slot = int(slot_ids[i])
        if slot and s in station_pos:
            rent_totals[station_pos[s], slot] += 1

    diags = DemandDiagnostics()
    has_status = set(np.unique(status.station.astype(str))) if len(status) else set()
    diags.stations_without_status = sum(1 for s in station_list if s not in has_status)

    groups = _events_by_station_day(trips, status, set(station_list))
    uptime_sums = np.zeros((n, 6, 8))  # station x slot x period
    for (station, day_idx), events in groups.items():
        diags.station_days += 1
        merged = _merge_events(
            [t for t, _, _ in events], [k for _, k, _ in events], [v for _, _, v in events]
        )
        day = date_t(1970, 1, 1) + timedelta(days=day_idx)
        if any(k == _K_STATUS for _, k, _ in merged):
            series = _anchored_availability(merged, station, day)
        else:
            series = offset_availability([(t, v) for t, _, v in merged], station, day)
        diags.clamped_events += series.clamped
        weekend = day.weekday() >= 5
        base = day_idx * 86400
        row = station_pos[station]
        for slot in slots_for_day_class(weekend):
            _, start_hour, end_hour = SLOTS[slot]
            for period in range(end_hour - start_hour):
                a = base + (start_hour + period) * 3600
                uptime_sums[row, slot, period] += uptime_minutes(series, a, a + 3600)

    profiles = []
    for row, station in enumerate(station_list):
        r_bar = np.zeros(5)
        tl_bar = np.zeros(5)
        u_hat = np.zeros(5)
        for slot in SLOTS:
            np_i = periods_in_slot(slot)
            r_bar[slot - 1] = rent_totals[row, slot] / denom[slot] / np_i
            tl_hat = uptime_sums[row, slot, :np_i] / denom[slot]
            tl_bar[slot - 1] = tl_hat.mean()
            u_hat[slot - 1] = checkout_rate(r_bar[slot - 1], tl_bar[slot - 1])
        profiles.append(
            CheckOutProfile(station, u_hat, checkout_profile(u_hat), r_bar, tl_bar)
        )
    return profiles, diags


def profile_matrix(profiles: list[CheckOutProfile]) -> np.ndarray:
    """Stack normalized profiles into an (n, 5) array in list order."""
    return np.array([p.profile for p in profiles], dtype=np.float64)


def write_profiles(
    path: str | Path,
    profiles: list[CheckOutProfile],
    meta: dict | None = None,
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n")
        w = csv.writer(fh, delimiter="\t")
        header = ["station"]
        header += [f"u{i}" for i in range(1, 6)]
        header += [f"U{i}" for i in range(1, 6)]
        header += [f"tl{i}" for i in range(1, 6)]
        w.writerow(header)
        for p in profiles:
            row = [p.station]
            row += [repr(float(v)) for v in p.u_hat]
            row += [repr(float(v)) for v in p.profile]
            row += [repr(float(v)) for v in p.tl_bar]
            w.writerow(row)


def read_profiles(path: str | Path) -> list[CheckOutProfile]:
    profiles = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader((ln for ln in fh if not ln.startswith("#")), delimiter="\t")
        next(reader)
        for row in reader:
            station = row[0]
            vals = [float(v) for v in row[1:]]
            u_hat = np.array(vals[0:5])
            profile = np.array(vals[5:10])
            tl_bar = np.array(vals[10:15])
            profiles.append(CheckOutProfile(station, u_hat, profile, np.zeros(5), tl_bar))
    return profiles
