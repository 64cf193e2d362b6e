"""Bike-share station clustering and trip link prediction.

The pipeline ingests trip, status, weather, and distance files; estimates
per-station check-out profiles; clusters stations by geography and
transition patterns; and trains an inductive graph embedder to predict
station-to-station links, with isotonic calibration and per-station error
reporting. A synthetic-city generator provides seeded desk-scale data.
"""

__version__ = "0.1.0"

from . import clustering, demand, ingest, linkpred, spectral, synth

__all__ = ["clustering", "demand", "ingest", "linkpred", "spectral", "synth", "__version__"]
