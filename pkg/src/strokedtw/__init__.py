"""Stroke trajectory recovery from images with DTW-aligned training targets."""

__version__ = "0.1.0"

from .adaptive import AdaptState, adapt_step
from .dataio import DatasetRecord, read_records, write_records
from .dtw import CostMatrix, PointMetric, cost_matrix, dtw, dtw_cost, dtw_grad, dtw_recompute_window
from .metrics import EvalReport, avg_dtw_distance, evaluate, nn_distance
from .render import DegradeConfig, RasterImage, Transform, degrade, rasterize
from .strokes import RelativeSequence, StrokeSequence, resample_equidistant
from .targets import LossConfig, composite_loss

__all__ = [
    "AdaptState", "adapt_step", "DatasetRecord", "read_records", "write_records", "CostMatrix",
    "PointMetric", "cost_matrix", "dtw", "dtw_cost", "dtw_grad", "dtw_recompute_window", "EvalReport",
    "avg_dtw_distance", "evaluate", "nn_distance", "DegradeConfig", "RasterImage", "Transform", "degrade",
    "rasterize", "RelativeSequence", "StrokeSequence", "resample_equidistant", "LossConfig", "composite_loss",
]
