"""Station transition graph distilled from the trip multigraph.

Nodes are stations; an undirected edge exists between two stations when at
least one trip ran between them in either direction. Trip multiplicities
are kept separately per directed pair for feature histograms and
evaluation counts, so removing edges for a split never loses them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from ..ingest import TripTable


def _pair(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass
class TransitionGraph:
    stations: list[str]
    edges: set[tuple[int, int]]                 # unordered, stored as (min, max)
    adjacency: list[np.ndarray]                 # sorted neighbor indices per node
    directed_counts: dict[tuple[int, int], int]  # trips per ordered (from, to) pair
    self_loop_trips: int = 0

    @property
    def n(self) -> int:
        return len(self.stations)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return _pair(u, v) in self.edges

    def degree(self, u: int) -> int:
        return len(self.adjacency[u])

    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.stations)}

    def without_edges(self, removed: list[tuple[int, int]]) -> "TransitionGraph":
        """Copy of the graph with the given unordered edges deleted."""
        gone = {_pair(u, v) for u, v in removed}
        missing = gone - self.edges
        if missing:
            raise DataError(f"{len(missing)} edges to remove are not in the graph")
        edges = self.edges - gone
        return TransitionGraph(
            stations=self.stations,
            edges=edges,
            adjacency=_adjacency_from_edges(self.n, edges),
            directed_counts=self.directed_counts,
            self_loop_trips=self.self_loop_trips,
        )

    def pair_trips(self, u: int, v: int) -> tuple[int, int]:
        """(trips u->v, trips v->u) regardless of edge presence."""
        return self.directed_counts.get((u, v), 0), self.directed_counts.get((v, u), 0)


def _adjacency_from_edges(n: int, edges: set[tuple[int, int]]) -> list[np.ndarray]:
    neighbors: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        neighbors[u].append(v)
        neighbors[v].append(u)
    return [np.array(sorted(ns), dtype=np.int64) for ns in neighbors]


def build_graph(trips: TripTable, stations: list[str]) -> TransitionGraph:
    """Distill the undirected transition graph over the given station order.

    Trips touching unknown stations are ignored; self-trips produce no edge
    but are counted in ``self_loop_trips``.
    """
    pos = {s: i for i, s in enumerate(stations)}
    edges: set[tuple[int, int]] = set()
    counts: dict[tuple[int, int], int] = {}
    self_loops = 0
    for s, e in zip(trips.start_station, trips.end_station):
        u = pos.get(s)
        v = pos.get(e)
        if u is None or v is None:
            continue
        if u == v:
            self_loops += 1
            continue
        counts[(u, v)] = counts.get((u, v), 0) + 1
        edges.add(_pair(u, v))
    return TransitionGraph(
        stations=list(stations),
        edges=edges,
        adjacency=_adjacency_from_edges(len(stations), edges),
        directed_counts=counts,
        self_loop_trips=self_loops,
    )


def restrict_to_prior_year(graph: TransitionGraph, prev_stations) -> TransitionGraph:
    """Drop nodes (and their edges) outside a prior station set.

    Used for mismatch evaluation: a model trained on one year can only be
    applied to stations whose cluster is known from that year.
    """
    keep_set = set(prev_stations)
    kept = [s for s in graph.stations if s in keep_set]
    if not kept:
        raise DataError("restriction removes every node")
    old_index = graph.index()
    remap = {old_index[s]: i for i, s in enumerate(kept)}
    edges = {
        _pair(remap[u], remap[v])
        for u, v in graph.edges
        if u in remap and v in remap
    }
    counts = {
        (remap[u], remap[v]): c
        for (u, v), c in graph.directed_counts.items()
        if u in remap and v in remap
    }
    return TransitionGraph(
        stations=kept,
        edges=edges,
        adjacency=_adjacency_from_edges(len(kept), edges),
        directed_counts=counts,
        self_loop_trips=graph.self_loop_trips,
    )
