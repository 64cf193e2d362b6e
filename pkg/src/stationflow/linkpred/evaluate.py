"""Test-set evaluation: accuracy, per-station prediction error, tables.

The prediction error compares, for every station, the trips it truly has
on positive test pairs against the trips it keeps on pairs the model
predicts positive, at the origin and at the destination separately. A
station with no true trips but predicted ones gets an infinite error,
counted apart and excluded from averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..ingest import TripTable
from .calibration import IsotonicCalibrator, reliability_table
from .graph import TransitionGraph
from .model import LinkModel, predict_pairs

PE_BIN_EDGES = (0.0, 5.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0)
PE_BIN_LABELS = (
    "[0-5]",
    "]5-15]",
    "]15-30]",
    "]30-45]",
    "]45-60]",
    "]60-75]",
    "]75-90]",
    ">90",
)


def pe_percentage(x_t: float, x_p: float) -> float:
    """Prediction error percentage; infinite when truth is zero but the
    prediction is not, zero when both are zero."""
    if x_t == 0:
        return math.inf if x_p > 0 else 0.0
    return abs(x_t - x_p) / x_t * 100.0


@dataclass
class PESide:
    """Per-station error at one endpoint role (origin or destination)."""

    stations: list[str]
    x_true: np.ndarray
    x_pred: np.ndarray
    pe: np.ndarray                 # percent, may contain inf

    @property
    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.pe)

    @property
    def infinite_count(self) -> int:
        return int(np.sum(~self.finite_mask))

    @property
    def mean_pe(self) -> float:
        m = self.finite_mask
        return float(self.pe[m].mean()) if m.any() else 0.0

    @property
    def mean_trips(self) -> float:
        return float(self.x_true.mean()) if len(self.x_true) else 0.0

    def bins(self) -> list[dict]:
        """Station counts and mean true trips per error interval."""
        rows = []
        pe = self.pe[self.finite_mask]
        xt = self.x_true[self.finite_mask]
        for i, label in enumerate(PE_BIN_LABELS):
            lo = PE_BIN_EDGES[i]
            if i == 0:
                mask = (pe >= 0.0) & (pe <= 5.0)
            elif i < len(PE_BIN_EDGES) - 1:
                mask = (pe > lo) & (pe <= PE_BIN_EDGES[i + 1])
            else:
                mask = pe > lo
            rows.append(
                {
                    "interval": label,
                    "stations": int(mask.sum()),
                    "mean_true_trips": float(xt[mask].mean()) if mask.any() else 0.0,
                }
            )
        return rows


@dataclass
class EvalReport:
    accuracy: float
    n_examples: int
    origin: PESide
    destination: PESide
    reliability: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_examples": self.n_examples,
            "origin": {
                "mean_pe": self.origin.mean_pe,
                "infinite_count": self.origin.infinite_count,
                "mean_trips": self.origin.mean_trips,
                "bins": self.origin.bins(),
            },
            "destination": {
                "mean_pe": self.destination.mean_pe,
                "infinite_count": self.destination.infinite_count,
                "mean_trips": self.destination.mean_trips,
                "bins": self.destination.bins(),
            },
            "reliability": self.reliability,
        }


def directed_pair_counts(trips: TripTable, stations: list[str]) -> dict[tuple[int, int], int]:
    pos = {s: i for i, s in enumerate(stations)}
    counts: dict[tuple[int, int], int] = {}
    for s, e in zip(trips.start_station, trips.end_station):
        u = pos.get(s)
        v = pos.get(e)
        if u is None or v is None or u == v:
            continue
        counts[(u, v)] = counts.get((u, v), 0) + 1
    return counts


def station_pe(
    stations: list[str],
    pairs: np.ndarray,
    labels: np.ndarray,
    predicted: np.ndarray,
    counts: dict[tuple[int, int], int],
) -> tuple[PESide, PESide]:
    """Per-station prediction error at origin and destination roles."""
    n = len(stations)
    xt_o = np.zeros(n)
    xp_o = np.zeros(n)
    xt_d = np.zeros(n)
    xp_d = np.zeros(n)
    for (u, v), y, yhat in zip(pairs, labels, predicted):
        u, v = int(u), int(v)
        c_uv = counts.get((u, v), 0)
        c_vu = counts.get((v, u), 0)
        if y:
            xt_o[u] += c_uv
            xt_o[v] += c_vu
            xt_d[v] += c_uv
            xt_d[u] += c_vu
        if yhat:
            xp_o[u] += c_uv
            xp_o[v] += c_vu
            xp_d[v] += c_uv
            xp_d[u] += c_vu
    pe_o = np.array([pe_percentage(t, p) for t, p in zip(xt_o, xp_o)])
    pe_d = np.array([pe_percentage(t, p) for t, p in zip(xt_d, xp_d)])
    return (
        PESide(list(stations), xt_o, xp_o, pe_o),
        PESide(list(stations), xt_d, xp_d, pe_d),
    )


def evaluate(
    model: LinkModel,
    calibrator: IsotonicCalibrator | None,
    g_test: TransitionGraph,
    features: np.ndarray,
    test_pairs: np.ndarray,
    test_labels: np.ndarray,
    trips_test: TripTable | None = None,
    threshold: float = 0.5,
    reliability_bins: int = 10,
) -> EvalReport:
    """Score every test pair on the test graph and summarize the outcome.

    Embeddings use full neighborhoods of ``g_test``, from which the test
    positives were removed, so no pair can see itself. Probabilities pass
    through the calibrator when one is supplied. Trip counts for the
    prediction error come from ``trips_test`` when given, otherwise from
    the multiplicities recorded on the graph.
    """
    raw = predict_pairs(model, g_test, features, test_pairs)
    probs = calibrator.predict(raw) if calibrator is not None else raw
    predicted = probs >= threshold
    labels = np.asarray(test_labels).astype(bool)
    accuracy = float(np.mean(predicted == labels))

    if trips_test is not None:
        counts = directed_pair_counts(trips_test, g_test.stations)
    else:
        counts = dict(g_test.directed_counts)
    origin, destination = station_pe(g_test.stations, test_pairs, labels, predicted, counts)

    return EvalReport(
        accuracy=accuracy,
        n_examples=len(test_pairs),
        origin=origin,
        destination=destination,
        reliability=reliability_table(probs, test_labels, reliability_bins),
    )


def pe_curve_rows(side: PESide) -> list[tuple[str, float, float]]:
    """(station, true trips, PE) sorted by increasing trip count; plot-ready."""
    order = np.lexsort((np.arange(len(side.x_true)), side.x_true))
    return [
        (side.stations[i], float(side.x_true[i]), float(side.pe[i]))
        for i in order
    ]
