"""Shared fixtures: tiny hand-built tables and a cached synthetic city."""

from __future__ import annotations

import numpy as np
import pytest

from stationflow import synth
from stationflow.ingest import StatusTable, TripTable
from stationflow.linkpred.graph import TransitionGraph, _adjacency_from_edges


def make_trips(rows) -> TripTable:
    """Build a TripTable from (start_iso, end_iso, start_id, end_id) rows."""
    start_t, end_t, s_id, e_id = [], [], [], []
    for start, end, s, e in rows:
        start_t.append(np.datetime64(start, "s"))
        end_t.append(np.datetime64(end, "s"))
        s_id.append(s)
        e_id.append(e)
    start_arr = np.array(start_t, dtype="datetime64[s]")
    end_arr = np.array(end_t, dtype="datetime64[s]")
    n = len(rows)
    return TripTable(
        duration=np.maximum((end_arr - start_arr).astype("int64"), 1),
        start_time=start_arr,
        end_time=end_arr,
        start_station=np.array(s_id, dtype=object),
        end_station=np.array(e_id, dtype=object),
        start_lat=np.full(n, 40.7),
        start_lon=np.full(n, -74.0),
        end_lat=np.full(n, 40.71),
        end_lon=np.full(n, -74.01),
    )


def make_status(rows) -> StatusTable:
    """Build a StatusTable from (station, iso_time, bikes) rows."""
    return StatusTable(
        station=np.array([r[0] for r in rows], dtype=object),
        time=np.array([np.datetime64(r[1], "s") for r in rows], dtype="datetime64[s]"),
        bikes_available=np.array([r[2] for r in rows], dtype=np.int64),
    )


def graph_from_edges(n: int, edges) -> TransitionGraph:
    edge_set = {(min(u, v), max(u, v)) for u, v in edges}
    return TransitionGraph(
        stations=[f"N{i}" for i in range(n)],
        edges=edge_set,
        adjacency=_adjacency_from_edges(n, edge_set),
        directed_counts={},
    )


@pytest.fixture(scope="session")
def small_city():
    """80 stations, 4 communities, 12k trips: dense enough to keep every
    station above the annual threshold, sparse enough to split edges."""
    return synth.generate(
        synth.SyntheticScenario(seed=9, n_stations=80, n_communities=4, n_trips=12_000)
    )


@pytest.fixture(scope="session")
def planted_city():
    """The desk-scale recovery scenario: 200 stations, 4 communities."""
    return synth.generate(synth.SyntheticScenario(seed=0))
