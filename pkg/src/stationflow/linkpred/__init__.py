"""Inductive link prediction on the station transition graph."""

from .calibration import IsotonicCalibrator, fit_calibrator, reliability_gap, reliability_table
from .evaluate import EvalReport, evaluate, pe_percentage
from .features import node_feature_matrix, seasonal_averages, standardize_features
from .graph import TransitionGraph, build_graph, restrict_to_prior_year
from .model import (
    Checkpoint,
    LinkModel,
    TrainConfig,
    embed_pair,
    init_model,
    predict_pairs,
    score_link,
    train,
)
from .sampling import EdgeSplit, sample_negative, split_edges

__all__ = [
    "Checkpoint",
    "EdgeSplit",
    "EvalReport",
    "IsotonicCalibrator",
    "LinkModel",
    "TrainConfig",
    "TransitionGraph",
    "build_graph",
    "embed_pair",
    "evaluate",
    "fit_calibrator",
    "init_model",
    "node_feature_matrix",
    "pe_percentage",
    "predict_pairs",
    "reliability_gap",
    "reliability_table",
    "restrict_to_prior_year",
    "sample_negative",
    "score_link",
    "seasonal_averages",
    "split_edges",
    "standardize_features",
    "train",
]
