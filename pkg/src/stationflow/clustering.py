"""Station clustering: k-medoids, geo and transit steps, and the AdaTC+ loop.

Geo-clustering groups stations by a trade-off dissimilarity (rho1 times the
symmetrized routing distance plus the L2 difference of the stations'
check-out profiles). Each station then gets a transit matrix: per time
slot, the empirical distribution of destination clusters for departing
trips concatenated with the distribution of origin clusters for arriving
trips. Transit-clustering groups stations by the Frobenius distance of
those matrices, and the two steps alternate until the geo medoid set is
stable or the outer iteration cap is hit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .demand import assign_time_slots
from .errors import DataError
from .ingest import TripTable

log = logging.getLogger(__name__)


def symmetrize(d: np.ndarray) -> np.ndarray:
    """Average a directed distance matrix with its transpose."""
    return (d + d.T) / 2.0


def pairwise_l2(x: np.ndarray) -> np.ndarray:
    """Euclidean distances between all row pairs of x."""
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    return d


def geo_dissimilarity(gd: float, u_h: np.ndarray, u_k: np.ndarray, rho1: float) -> float:
    """Trade-off dissimilarity: rho1 * distance + check-out profile gap."""
    if gd < 0:
        raise ValueError("distance must be non-negative")
    return rho1 * gd + float(np.linalg.norm(np.asarray(u_h) - np.asarray(u_k)))


def geo_dissimilarity_matrix(gd_sym: np.ndarray, profiles: np.ndarray, rho1: float) -> np.ndarray:
    return rho1 * gd_sym + pairwise_l2(profiles)


@dataclass
class Clustering:
    """Assignment of stations to clusters, one medoid per cluster."""

    assignment: np.ndarray          # cluster id per station index
    medoids: np.ndarray             # station index per cluster id
    stations: list[str] | None = None

    @property
    def k(self) -> int:
        return len(self.medoids)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster)

    def medoid_set(self) -> frozenset:
        return frozenset(int(m) for m in self.medoids)

    def validate(self) -> None:
        for c, m in enumerate(self.medoids):
            if self.assignment[m] != c:
                raise ValueError(f"medoid {m} not assigned to its own cluster {c}")
        counts = np.bincount(self.assignment, minlength=self.k)
        if np.any(counts == 0):
            raise ValueError("empty cluster")

    def to_dict(self) -> dict:
        stations = self.stations or [str(i) for i in range(len(self.assignment))]
        return {
            "k": self.k,
            "assignment": {stations[i]: int(c) for i, c in enumerate(self.assignment)},
            "medoids": {str(c): stations[int(m)] for c, m in enumerate(self.medoids)},
        }


def clustering_objective(d: np.ndarray, clustering: Clustering) -> float:
    return float(d[np.arange(len(clustering.assignment)), clustering.medoids[clustering.assignment]].sum())


def _farthest_first(d: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = d.shape[0]
    first = int(rng.integers(n))
    medoids = [first]
    nearest = d[first].copy()
    while len(medoids) < k:
        nxt = int(np.argmax(nearest))  # argmax takes the lowest index on ties
        medoids.append(nxt)
        np.minimum(nearest, d[nxt], out=nearest)
    return np.sort(np.array(medoids))


def _assign(d: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    assignment = np.argmin(d[:, medoids], axis=1)
    assignment[medoids] = np.arange(len(medoids))  # a medoid anchors its own cluster
    return assignment


def _alternate(d: np.ndarray, medoids: np.ndarray, max_iters: int) -> np.ndarray:
    """Assign/update rounds until the medoid set repeats."""
    k = len(medoids)
    for _ in range(max_iters):
        assignment = _assign(d, medoids)
        new_medoids = np.empty(k, dtype=np.int64)
        for c in range(k):
            members = np.flatnonzero(assignment == c)
            totals = d[np.ix_(members, members)].sum(axis=1)
            new_medoids[c] = members[int(np.argmin(totals))]
        new_medoids = np.sort(new_medoids)
        if np.array_equal(new_medoids, medoids):
            break
        medoids = new_medoids
    return medoids


def _swap_refine(d: np.ndarray, medoids: np.ndarray, max_swaps: int) -> np.ndarray:
    """Greedy best-improvement medoid swaps until none helps.

    Leaves the medoid set swap-stable: no exchange of one medoid for one
    non-medoid lowers the total dissimilarity.
    """
    n = d.shape[0]
    k = len(medoids)
    for _ in range(max_swaps):
        assignment = _assign(d, medoids)
        ranked = np.sort(d[:, medoids], axis=1)
        d1 = ranked[:, 0]
        d2 = ranked[:, 1] if k > 1 else np.full(n, np.inf)
        current = d1.sum()
        non_medoids = np.setdiff1d(np.arange(n), medoids)
        if len(non_medoids) == 0:
            break
        best_gain = 0.0
        best_swap = None
        for c in range(k):
            survivors = np.where(assignment == c, d2, d1)
            objectives = np.minimum(survivors[:, None], d[:, non_medoids]).sum(axis=0)
            j = int(np.argmin(objectives))
            gain = current - objectives[j]
            if gain > best_gain + 1e-12:
                best_gain = gain
                best_swap = (c, int(non_medoids[j]))
        if best_swap is None:
            break
        medoids = medoids.copy()
        medoids[best_swap[0]] = best_swap[1]
        medoids = np.sort(medoids)
    return medoids


def _auto_restarts(k: int) -> int:
    return max(2, min(16, 96 // max(k, 1)))


def k_medoids(
    d: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    restarts: int | None = None,
    max_swaps: int | None = None,
) -> Clustering:
    """Alternating assign/update k-medoids on a dissimilarity matrix.

    Points are assigned to the nearest medoid (ties to the lowest station
    index); each medoid is replaced by the in-cluster point with the
    smallest total dissimilarity to its cluster (ties likewise), stopping
    when the medoid set repeats or after max_iters rounds; the objective
    never increases between rounds. Each converged set is then polished
    with best-improvement swaps so the result is swap-stable. The first
    start is greedy farthest-first from a seeded random point; additional
    seeded random starts guard against poor local optima, and the best
    objective wins (ties to the lexicographically smallest medoid set).
    """
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("dissimilarity matrix must be square")
    if k < 1 or k > n:
        raise DataError(f"cannot place {k} medoids among {n} points")
    rng = np.random.default_rng(seed)
    n_restarts = _auto_restarts(k) if restarts is None else max(1, restarts)
    swap_budget = (4 * k + 16) if max_swaps is None else max_swaps

    best: tuple[float, tuple, np.ndarray] | None = None
    for r in range(n_restarts):
        if r == 0:
            medoids = _farthest_first(d, k, rng)
        else:
            medoids = np.sort(rng.choice(n, size=k, replace=False))
        medoids = _alternate(d, medoids, max_iters)
        medoids = _swap_refine(d, medoids, swap_budget)
        objective = float(d[np.arange(n), medoids[_assign(d, medoids)]].sum())
        key = (objective, tuple(int(m) for m in medoids))
        if best is None or objective < best[0] - 1e-12 or (
            abs(objective - best[0]) <= 1e-12 and key[1] < best[1]
        ):
            best = (objective, key[1], medoids)

    medoids = best[2]
    return Clustering(assignment=_assign(d, medoids), medoids=medoids)


def apportion_groups(sizes: list[int], k1: int) -> list[int]:
    """Distribute k1 sub-cluster slots over groups, proportional to size.

    Largest-remainder rounding of the quotas size * k1 / total, then the
    minimal adjustment that keeps every count within [1, size] while the
    counts still sum to k1.
    """
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes):
        raise ValueError("group sizes must be positive")
    total = sum(sizes)
    if k1 < len(sizes):
        raise DataError(f"cannot give {len(sizes)} groups at least one of {k1} slots")
    if k1 > total:
        raise DataError(f"cannot place {k1} slots among {total} stations")

    quotas = [s * k1 / total for s in sizes]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    short = k1 - sum(counts)
    for i in sorted(range(len(sizes)), key=lambda i: (-remainders[i], i))[:short]:
        counts[i] += 1

    counts = [min(max(c, 1), s) for c, s in zip(counts, sizes)]
    while sum(counts) > k1:
        # Shed from the entry exceeding its quota the most, never below 1.
        candidates = [i for i in range(len(counts)) if counts[i] > 1]
        i = max(candidates, key=lambda i: (counts[i] - quotas[i], -i))
        counts[i] -= 1
    while sum(counts) < k1:
        candidates = [i for i in range(len(counts)) if counts[i] < sizes[i]]
        i = max(candidates, key=lambda i: (quotas[i] - counts[i], -i))
        counts[i] += 1
    return counts


def geo_cluster_step(
    groups: list[np.ndarray],
    d_gc: np.ndarray,
    k1: int,
    seed: int,
    max_iters: int = 100,
) -> Clustering:
    """Run k-medoids independently inside each group with apportioned k's.

    The union of the per-group clusterings is a k1-clustering of all
    stations, with cluster ids numbered consecutively group by group.
    """
    n = d_gc.shape[0]
    counts = apportion_groups([len(g) for g in groups], k1)
    assignment = np.full(n, -1, dtype=np.int64)
    medoids: list[int] = []
    next_id = 0
    for gi, (members, k_g) in enumerate(zip(groups, counts)):
        members = np.asarray(members)
        sub = d_gc[np.ix_(members, members)]
        local = k_medoids(sub, k_g, seed=seed + 7919 * gi, max_iters=max_iters)
        assignment[members] = local.assignment + next_id
        medoids.extend(int(members[m]) for m in local.medoids)
        next_id += k_g
    if np.any(assignment < 0):
        raise DataError("groups do not cover all stations")
    return Clustering(assignment=assignment, medoids=np.array(medoids, dtype=np.int64))


@dataclass(frozen=True)
class TripTransitions:
    """Per-trip station indices and slot ids over a fixed station order."""

    start_idx: np.ndarray
    end_idx: np.ndarray
    start_slot: np.ndarray
    end_slot: np.ndarray

    @classmethod
    def from_trips(cls, trips: TripTable, stations: list[str]) -> "TripTransitions":
        pos = {s: i for i, s in enumerate(stations)}
        start_idx = np.array([pos.get(s, -1) for s in trips.start_station], dtype=np.int64)
        end_idx = np.array([pos.get(s, -1) for s in trips.end_station], dtype=np.int64)
        keep = (start_idx >= 0) & (end_idx >= 0)
        return cls(
            start_idx=start_idx[keep],
            end_idx=end_idx[keep],
            start_slot=assign_time_slots(trips.start_time[keep]).astype(np.int64),
            end_slot=assign_time_slots(trips.end_time[keep]).astype(np.int64),
        )


def build_transit_matrices(
    assignment: np.ndarray,
    k1: int,
    transitions: TripTransitions,
) -> np.ndarray:
    """Transit matrices for all stations, shape (n, 5, 2 * k1).

    Row i of a station's matrix concatenates the ride-to-cluster
    distribution (where do slot-i departures end up) with the
    return-from-cluster distribution (where do slot-i arrivals come from).
    Each half is normalized to sum to 1, or left all-zero when the station
    has no trips in that slot and direction.
    """
    n = len(assignment)
    t = np.zeros((n, 5, 2 * k1), dtype=np.float64)

    dep = transitions.start_slot > 0
    np.add.at(
        t,
        (transitions.start_idx[dep], transitions.start_slot[dep] - 1, assignment[transitions.end_idx[dep]]),
        1.0,
    )
    arr = transitions.end_slot > 0
    np.add.at(
        t,
        (transitions.end_idx[arr], transitions.end_slot[arr] - 1, k1 + assignment[transitions.start_idx[arr]]),
        1.0,
    )

    for half in (t[:, :, :k1], t[:, :, k1:]):
        sums = half.sum(axis=2, keepdims=True)
        np.divide(half, sums, out=half, where=sums > 0)
    return t


def build_transit_matrix(
    station: str,
    clustering: Clustering,
    transitions: TripTransitions,
    stations: list[str],
) -> np.ndarray:
    """Single-station transit matrix (5 x 2k) over the given station order."""
    return build_transit_matrices(clustering.assignment, clustering.k, transitions)[
        stations.index(station)
    ]


def transit_dissimilarity(a_h: np.ndarray, a_k: np.ndarray) -> float:
    """Frobenius norm of the element-wise difference of two transit matrices."""
    if a_h.shape != a_k.shape:
        raise DataError(f"transit matrix shapes differ: {a_h.shape} vs {a_k.shape}")
    return float(np.linalg.norm(a_h - a_k))


def transit_dissimilarity_matrix(t: np.ndarray) -> np.ndarray:
    return pairwise_l2(t.reshape(t.shape[0], -1))


def transit_cluster_step(t: np.ndarray, k2: int, seed: int, max_iters: int = 100) -> Clustering:
    return k_medoids(transit_dissimilarity_matrix(t), k2, seed=seed, max_iters=max_iters)


@dataclass(frozen=True)
class AdaTCParams:
    rho1: float
    k1: int
    k2: int
    n_outer: int = 10
    max_iters_gc: int = 100
    max_iters_tc: int = 100
    seed: int = 0

    def validate(self, n_stations: int) -> None:
        if self.rho1 < 0:
            raise DataError("rho1 must be non-negative")
        if not 1 <= self.k2 <= self.k1 <= n_stations:
            raise DataError(
                f"need k2 <= k1 <= n, got k2={self.k2}, k1={self.k1}, n={n_stations}"
            )
        if min(self.n_outer, self.max_iters_gc, self.max_iters_tc) < 1:
            raise DataError("iteration caps must be at least 1")


@dataclass(frozen=True)
class ClusterQualityReport:
    """Within/between cluster distance summaries plus total dissimilarities."""

    agd_inner: float
    acod_inner: float
    agd_inter: float
    acod_inter: float
    td_gc: float
    td_tc: float

    @property
    def tdf(self) -> float:
        return self.td_gc + self.td_tc

    def to_dict(self) -> dict:
        return {
            "agd_inner": self.agd_inner,
            "acod_inner": self.acod_inner,
            "agd_inter": self.agd_inter,
            "acod_inter": self.acod_inter,
            "td_gc": self.td_gc,
            "td_tc": self.td_tc,
            "tdf": self.tdf,
        }


def _mean_same_cluster_pairs(metric: np.ndarray, clustering: Clustering) -> float:
    total = 0.0
    pairs = 0
    for c in range(clustering.k):
        members = clustering.members(c)
        m = len(members)
        if m < 2:
            continue
        total += float(metric[np.ix_(members, members)].sum()) / 2.0
        pairs += m * (m - 1) // 2
    return total / pairs if pairs else 0.0


def _mean_medoid_pairs(metric: np.ndarray, clustering: Clustering) -> float:
    meds = clustering.medoids
    if len(meds) < 2:
        return 0.0
    sub = metric[np.ix_(meds, meds)]
    k = len(meds)
    return float(sub.sum() / 2.0 / (k * (k - 1) // 2))


def total_dissimilarity(diss: np.ndarray, clustering: Clustering) -> float:
    """Sum of each station's dissimilarity to its own cluster's medoid."""
    return clustering_objective(diss, clustering)


def quality_report(
    gc: Clustering,
    tc: Clustering | None,
    gd_sym: np.ndarray,
    cod: np.ndarray,
    d_gc: np.ndarray,
    d_tc: np.ndarray | None,
) -> ClusterQualityReport:
    return ClusterQualityReport(
        agd_inner=_mean_same_cluster_pairs(gd_sym, gc),
        acod_inner=_mean_same_cluster_pairs(cod, gc),
        agd_inter=_mean_medoid_pairs(gd_sym, gc),
        acod_inter=_mean_medoid_pairs(cod, gc),
        td_gc=total_dissimilarity(d_gc, gc),
        td_tc=total_dissimilarity(d_tc, tc) if tc is not None and d_tc is not None else 0.0,
    )


@dataclass
class AdaTCResult:
    clustering: Clustering          # final geo clustering, k1 clusters
    tc_clustering: Clustering | None  # last transit clustering, k2 clusters
    reports: list[ClusterQualityReport]
    iterations: int
    converged: bool


def adatc_plus(
    gd_sym: np.ndarray,
    profiles: np.ndarray,
    transitions: TripTransitions,
    params: AdaTCParams,
    stations: list[str] | None = None,
) -> AdaTCResult:
    """Alternate geo-clustering, transit-matrix generation, and
    transit-clustering until the geo medoid set repeats or the outer cap.

    The first geo pass clusters all stations at once; later passes run
    inside the previous transit clusters with apportioned cluster counts.
    """
    n = gd_sym.shape[0]
    params.validate(n)
    d_gc = geo_dissimilarity_matrix(gd_sym, profiles, params.rho1)
    cod = pairwise_l2(profiles)

    groups: list[np.ndarray] = [np.arange(n)]
    prev_medoids: frozenset | None = None
    gc: Clustering | None = None
    tc: Clustering | None = None
    reports: list[ClusterQualityReport] = []
    converged = False
    iteration = 0

    for iteration in range(1, params.n_outer + 1):
        seed_it = params.seed + 7919 * iteration
        gc = geo_cluster_step(groups, d_gc, params.k1, seed=seed_it, max_iters=params.max_iters_gc)
        gc.stations = stations
        if prev_medoids is not None and gc.medoid_set() == prev_medoids:
            converged = True
            break
        prev_medoids = gc.medoid_set()

        t = build_transit_matrices(gc.assignment, params.k1, transitions)
        d_tc = transit_dissimilarity_matrix(t)
        tc = k_medoids(d_tc, params.k2, seed=seed_it + 104729, max_iters=params.max_iters_tc)
        tc.stations = stations
        reports.append(quality_report(gc, tc, gd_sym, cod, d_gc, d_tc))
        groups = [tc.members(c) for c in range(tc.k)]

    return AdaTCResult(
        clustering=gc,
        tc_clustering=tc,
        reports=reports,
        iterations=iteration,
        converged=converged,
    )


def baseline_km(d_gc: np.ndarray, k: int = 70, seed: int = 0, max_iters: int = 100) -> Clustering:
    """Plain k-medoids on the geo trade-off dissimilarity matrix."""
    return k_medoids(d_gc, k, seed=seed, max_iters=max_iters)


# Default parameter grid for the validation sweep: a coarse log-style scale
# with midpoints for rho1, and decade steps for the cluster counts.
RHO1_GRID = (0.0, 5e-4, 1e-3, 5.5e-3, 1e-2, 5.5e-2, 1e-1, 5.05e-1, 1.0, 5.5, 10.0)
K1_GRID = (50, 60, 70, 80, 90, 100)
K2_GRID = (10, 20, 30, 40, 50)


@dataclass
class GridCell:
    rho1: float
    k1: int
    k2: int
    report: ClusterQualityReport | None = None
    iterations: int = 0
    converged: bool = False
    error: str | None = None
    pareto: bool = False
    in_window: bool = False

    def key(self) -> str:
        return f"rho1={self.rho1!r},k1={self.k1},k2={self.k2}"

    def to_dict(self) -> dict:
        out = {
            "rho1": self.rho1,
            "k1": self.k1,
            "k2": self.k2,
            "iterations": self.iterations,
            "converged": self.converged,
            "error": self.error,
            "pareto": self.pareto,
            "in_window": self.in_window,
        }
        if self.report is not None:
            out.update(self.report.to_dict())
        return out


def _dominates(a: ClusterQualityReport, b: ClusterQualityReport) -> bool:
    ge = (
        a.agd_inner <= b.agd_inner
        and a.acod_inner <= b.acod_inner
        and a.agd_inter >= b.agd_inter
        and a.acod_inter >= b.acod_inter
    )
    strict = (
        a.agd_inner < b.agd_inner
        or a.acod_inner < b.acod_inner
        or a.agd_inter > b.agd_inter
        or a.acod_inter > b.acod_inter
    )
    return ge and strict


def mark_pareto(cells: list[GridCell], rho_window: tuple[float, float]) -> None:
    """Flag cells inside the rho1 window that no other windowed cell dominates."""
    lo, hi = rho_window
    windowed = [c for c in cells if c.report is not None and lo <= c.rho1 <= hi]
    for c in cells:
        c.in_window = c.report is not None and lo <= c.rho1 <= hi
    for c in windowed:
        c.pareto = not any(_dominates(o.report, c.report) for o in windowed if o is not c)


def grid_search(
    gd_sym: np.ndarray,
    profiles: np.ndarray,
    transitions: TripTransitions,
    rho1_values=RHO1_GRID,
    k1_values=K1_GRID,
    k2_values=K2_GRID,
    n_outer: int = 10,
    max_iters_gc: int = 100,
    max_iters_tc: int = 100,
    seed: int = 0,
    rho_window: tuple[float, float] = (0.1, 0.505),
    checkpoint_path: str | Path | None = None,
) -> list[GridCell]:
    """Run the clustering loop for every parameter combination.

    Failed combinations are recorded, not fatal. With a checkpoint path,
    finished cells are appended as JSON lines and skipped on a re-run.
    """
    done: dict[str, dict] = {}
    if checkpoint_path is not None and Path(checkpoint_path).exists():
        with open(checkpoint_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    done[rec["key"]] = rec

    cells: list[GridCell] = []
    ckpt = open(checkpoint_path, "a", encoding="utf-8") if checkpoint_path is not None else None
    try:
        for rho1 in rho1_values:
            for k1 in k1_values:
                for k2 in k2_values:
                    cell = GridCell(rho1=float(rho1), k1=int(k1), k2=int(k2))
                    if cell.key() in done:
                        rec = done[cell.key()]
                        cell.iterations = rec["iterations"]
                        cell.converged = rec["converged"]
                        cell.error = rec["error"]
                        if rec["error"] is None:
                            cell.report = ClusterQualityReport(
                                **{f: rec[f] for f in (
                                    "agd_inner", "acod_inner", "agd_inter", "acod_inter",
                                    "td_gc", "td_tc",
                                )}
                            )
                        cells.append(cell)
                        continue
                    params = AdaTCParams(
                        rho1=float(rho1), k1=int(k1), k2=int(k2),
                        n_outer=n_outer, max_iters_gc=max_iters_gc,
                        max_iters_tc=max_iters_tc,
                        seed=seed + len(cells),
                    )
                    try:
                        result = adatc_plus(gd_sym, profiles, transitions, params)
                        cell.report = result.reports[-1] if result.reports else None
                        cell.iterations = result.iterations
                        cell.converged = result.converged
                        if cell.report is None:
                            cell.error = "no completed iteration"
                    except Exception as exc:  # per-cell failures are data, not fatal
                        cell.error = f"{type(exc).__name__}: {exc}"
                        log.warning("grid cell %s failed: %s", cell.key(), cell.error)
                    cells.append(cell)
                    if ckpt is not None:
                        rec = {"key": cell.key(), **cell.to_dict()}
                        ckpt.write(json.dumps(rec, sort_keys=True) + "\n")
                        ckpt.flush()
    finally:
        if ckpt is not None:
            ckpt.close()

    mark_pareto(cells, rho_window)
    return cells


def suggest_mid_k1(cells: list[GridCell]) -> GridCell | None:
    """Annotation helper: the Pareto cell whose k1 is closest to the middle
    of the Pareto k1 range (mirrors picking a mid-range cluster count by
    hand)."""
    front = [c for c in cells if c.pareto]
    if not front:
        return None
    k1s = sorted({c.k1 for c in front})
    mid = (k1s[0] + k1s[-1]) / 2.0
    return min(front, key=lambda c: (abs(c.k1 - mid), c.rho1, c.k2))
