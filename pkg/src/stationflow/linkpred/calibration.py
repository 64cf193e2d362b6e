"""Isotonic probability calibration via pool-adjacent-violators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IsotonicCalibrator:
    """Non-decreasing step function mapping raw scores to probabilities.

    ``x`` holds the left edge of each constant block in ascending order;
    a score below the first edge maps to the first value.
    """

    x: np.ndarray
    y: np.ndarray

    def predict(self, probs) -> np.ndarray:
        p = np.atleast_1d(np.asarray(probs, dtype=np.float64))
        idx = np.clip(np.searchsorted(self.x, p, side="right") - 1, 0, len(self.x) - 1)
        return self.y[idx]

    def __call__(self, probs) -> np.ndarray:
        return self.predict(probs)


def _pool_equal_x(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Average targets sharing the same score before running PAV."""
    ux, inverse = np.unique(x, return_inverse=True)
    sums = np.zeros(len(ux))
    weights = np.zeros(len(ux))
    np.add.at(sums, inverse, y)
    np.add.at(weights, inverse, 1.0)
    return ux, sums / weights, weights


def fit_calibrator(probs: np.ndarray, labels: np.ndarray) -> IsotonicCalibrator:
    """Fit labels against sorted scores with pool-adjacent-violators.

    Adjacent blocks whose fitted values decrease are merged into their
    weighted mean until the sequence is non-decreasing. With single-class
    labels the result degenerates to a constant map (warned).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(p) < 2:
        raise ValueError("need at least two validation examples to calibrate")
    if len(p) != len(y):
        raise ValueError("scores and labels differ in length")
    if len(np.unique(y)) < 2:
        warnings.warn("single-class validation labels: calibrator is constant")
        return IsotonicCalibrator(x=np.array([0.0]), y=np.array([float(y[0])]))

    order = np.argsort(p, kind="stable")
    x, targets, weights = _pool_equal_x(p[order], y[order])

    # Blocks as (start index, fitted value, weight); merge while violating.
    starts = list(range(len(x)))
    values = list(targets)
    wts = list(weights)
    i = 0
    while i < len(values) - 1:
        if values[i] > values[i + 1]:
            total = wts[i] + wts[i + 1]
            merged = (values[i] * wts[i] + values[i + 1] * wts[i + 1]) / total
            values[i] = merged
            wts[i] = total
            del values[i + 1], wts[i + 1], starts[i + 1]
            if i > 0:
                i -= 1
        else:
            i += 1

    block_x = np.array([x[s] for s in starts])
    block_y = np.clip(np.array(values), 0.0, 1.0)
    return IsotonicCalibrator(x=block_x, y=block_y)


def reliability_table(probs: np.ndarray, labels: np.ndarray, bins: int = 10) -> list[dict]:
    """Equal-width probability bins with mean prediction and frequency."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.digitize(p, edges[1:-1]), 0, bins - 1)
    rows = []
    for b in range(bins):
        mask = idx == b
        rows.append(
            {
                "bin_lo": float(edges[b]),
                "bin_hi": float(edges[b + 1]),
                "count": int(mask.sum()),
                "mean_prob": float(p[mask].mean()) if mask.any() else 0.0,
                "frequency": float(y[mask].mean()) if mask.any() else 0.0,
            }
        )
    return rows


def reliability_gap(probs: np.ndarray, labels: np.ndarray, bins: int = 10) -> float:
    """Mean |frequency - mean prediction| over occupied bins."""
    rows = [r for r in reliability_table(probs, labels, bins) if r["count"] > 0]
    if not rows:
        return 0.0
    return float(np.mean([abs(r["frequency"] - r["mean_prob"]) for r in rows]))
