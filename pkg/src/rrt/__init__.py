"""Randomized regression trees with exact selective inference for leaf means."""

from .baselines import UVPair, naive_ci, naive_intervals, uv_decompose, uv_pipeline
from .core import Dataset, FittedTree, NodeTrace, Region, SplitCandidate, build_target
from .grow import GrowConfig, Stopping, gain, grow, predict, predict_many
from .inference import LeafInterval, PivotEvaluator, estimate_sigma, infer_tree, invert_ci, p_value, pivot

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FittedTree",
    "GrowConfig",
    "LeafInterval",
    "NodeTrace",
    "PivotEvaluator",
    "Region",
    "SplitCandidate",
    "Stopping",
    "UVPair",
    "build_target",
    "estimate_sigma",
    "gain",
    "grow",
    "infer_tree",
    "invert_ci",
    "naive_ci",
    "naive_intervals",
    "p_value",
    "pivot",
    "predict",
    "predict_many",
    "uv_decompose",
    "uv_pipeline",
]
