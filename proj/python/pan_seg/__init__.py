"""Pyramid attention segmentation network (C++ core) for desk-scale synthetic data."""

from ._pan import (
    MULTI_SCALE_GRID,
    ConfigError,
    Error,
    FormatError,
    Model,
    NumericError,
    ShapeError,
    case_names,
    generate_sample,
    gradcheck,
    poly_lr,
    segmentation_metrics,
)

__all__ = [
    "MULTI_SCALE_GRID",
    "ConfigError",
    "Error",
    "FormatError",
    "Model",
    "NumericError",
    "ShapeError",
    "case_names",
    "generate_sample",
    "gradcheck",
    "poly_lr",
    "segmentation_metrics",
]
