"""Edge splitting and negative-pair sampling for link prediction.

Positive examples are edges sampled without replacement and removed from
the corresponding graphs in nesting order: test edges leave the full
graph, validation edges leave the test-reduced graph, and training edges
leave the remainder, so no split can see its own positives. Negative
examples are non-adjacent pairs found by a depth-first traversal at a
sampled depth from a random source, with a uniform fallback.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .graph import TransitionGraph

log = logging.getLogger(__name__)

DEFAULT_DEPTHS = (2, 3, 4, 5)


def _dfs_depth_candidates(
    graph: TransitionGraph,
    source: int,
    depth: int,
    rng: np.random.Generator,
) -> list[int]:
    """Nodes first reached at exactly ``depth`` by a randomized DFS."""
    visited = np.zeros(graph.n, dtype=bool)
    stack: list[tuple[int, int]] = [(source, 0)]
    out: list[int] = []
    while stack:
        v, dv = stack.pop()
        if visited[v]:
            continue
        visited[v] = True
        if dv == depth:
            out.append(v)
            continue
        neigh = graph.adjacency[v]
        if len(neigh):
            order = rng.permutation(len(neigh))
            stack.extend((int(neigh[i]), dv + 1) for i in order if not visited[neigh[i]])
    return out


def _non_edge_capacity(graph: TransitionGraph, exclude: set[tuple[int, int]]) -> int:
    total = graph.n * (graph.n - 1) // 2 - graph.n_edges
    return total - len(exclude)


def sample_negative(
    graph: TransitionGraph,
    rng: np.random.Generator,
    exclude: set[tuple[int, int]] | None = None,
    depths: tuple[int, ...] = DEFAULT_DEPTHS,
    max_retries: int = 50,
) -> tuple[int, int]:
    """One non-edge pair: a random source plus a node met at DFS depth d.

    The depth d is drawn uniformly from ``depths``; the target is drawn
    uniformly among the non-adjacent, not-yet-sampled nodes whose DFS depth
    is exactly d. Attempts without such a node are retried with a fresh
    source and depth, then a uniform non-edge draw takes over.
    """
    exclude = exclude if exclude is not None else set()
    total_non_edges = graph.n * (graph.n - 1) // 2 - graph.n_edges
    if total_non_edges == 0:
        raise DataError("no negative examples exist: the graph is complete")
    if _non_edge_capacity(graph, exclude) <= 0:
        raise DataError(
            f"insufficient non-edges: {total_non_edges} exist, {len(exclude)} already sampled"
        )

    for _ in range(max_retries):
        source = int(rng.integers(graph.n))
        depth = int(depths[rng.integers(len(depths))])
        candidates = [
            v
            for v in _dfs_depth_candidates(graph, source, depth, rng)
            if v != source
            and not graph.has_edge(source, v)
            and (min(source, v), max(source, v)) not in exclude
        ]
        if candidates:
            v = candidates[int(rng.integers(len(candidates)))]
            return (min(source, v), max(source, v))

    # Uniform fallback: rejection sampling, then exhaustive enumeration.
    for _ in range(10_000):
        u = int(rng.integers(graph.n))
        v = int(rng.integers(graph.n))
        if u == v:
            continue
        pair = (min(u, v), max(u, v))
        if pair not in exclude and not graph.has_edge(*pair):
            return pair
    remaining = [
        (u, v)
        for u in range(graph.n)
        for v in range(u + 1, graph.n)
        if (u, v) not in graph.edges and (u, v) not in exclude
    ]
    return remaining[int(rng.integers(len(remaining)))]


@dataclass
class EdgeSplit:
    """Per-split graphs and balanced labeled example lists."""

    g_train: TransitionGraph
    g_val: TransitionGraph
    g_test: TransitionGraph
    train_pairs: np.ndarray
    train_labels: np.ndarray
    val_pairs: np.ndarray
    val_labels: np.ndarray
    test_pairs: np.ndarray
    test_labels: np.ndarray


def _sample_positives(
    edges: list[tuple[int, int]],
    count: int,
    rng: np.random.Generator,
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    idx = rng.choice(len(edges), size=count, replace=False)
    chosen = [edges[i] for i in sorted(int(i) for i in idx)]
    chosen_set = set(chosen)
    rest = [e for e in edges if e not in chosen_set]
    return chosen, rest


def split_edges(
    graph: TransitionGraph,
    test_frac: float = 0.1,
    val_frac: float = 0.1,
    seed: int = 0,
    train_frac: float = 0.2,
    depths: tuple[int, ...] = DEFAULT_DEPTHS,
) -> EdgeSplit:
    """Sample test, validation, and train example sets with their graphs.

    All three fractions are of the full edge count. Negatives are sampled
    per split with equal counts to the positives and are disjoint across
    splits, as are the positives by construction.
    """
    if min(test_frac, val_frac, train_frac) <= 0:
        raise DataError("split fractions must be positive")
    if test_frac + val_frac >= 1:
        raise DataError("test and validation fractions must leave room for training edges")
    e = graph.n_edges
    n_test = int(round(test_frac * e))
    n_val = int(round(val_frac * e))
    n_train = int(round(train_frac * e))
    if min(n_test, n_val, n_train) < 1:
        raise DataError(f"graph with {e} edges is too small for the requested fractions")
    if n_test + n_val + n_train > e:
        raise DataError("split fractions exceed the available edges")
    capacity = graph.n * (graph.n - 1) // 2 - e
    if capacity < n_test + n_val + n_train:
        raise DataError(
            f"insufficient non-edges for negatives: need {n_test + n_val + n_train}, have {capacity}"
        )

    rng = np.random.default_rng(seed)
    edges = sorted(graph.edges)
    test_pos, rest = _sample_positives(edges, n_test, rng)
    val_pos, rest = _sample_positives(rest, n_val, rng)
    train_pos, _ = _sample_positives(rest, n_train, rng)

    g_test = graph.without_edges(test_pos)
    g_val = g_test.without_edges(val_pos)
    g_train = g_val.without_edges(train_pos)

    isolated = sum(1 for u in range(g_train.n) if g_train.degree(u) == 0)
    if isolated:
        log.warning("%d nodes are isolated in the training graph", isolated)

    exclude: set[tuple[int, int]] = set()
    negatives = {}
    for name, count in (("test", n_test), ("val", n_val), ("train", n_train)):
        batch = []
        for _ in range(count):
            pair = sample_negative(graph, rng, exclude=exclude, depths=depths)
            exclude.add(pair)
            batch.append(pair)
        negatives[name] = batch

    def pack(pos, neg):
        pairs = np.array(pos + neg, dtype=np.int64)
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        return pairs, labels

    train_pairs, train_labels = pack(train_pos, negatives["train"])
    val_pairs, val_labels = pack(val_pos, negatives["val"])
    test_pairs, test_labels = pack(test_pos, negatives["test"])
    return EdgeSplit(
        g_train=g_train,
        g_val=g_val,
        g_test=g_test,
        train_pairs=train_pairs,
        train_labels=train_labels,
        val_pairs=val_pairs,
        val_labels=val_labels,
        test_pairs=test_pairs,
        test_labels=test_labels,
    )
