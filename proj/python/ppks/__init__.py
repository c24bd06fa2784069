"""Prototype network for kidney-stone patch classification."""

from ._ppks import (
    DivergenceError,
    Dataset,
    Error,
    IoError,
    Model,
    ShapeError,
    ValueError,
    default_config,
    embed,
    knn_purity,
    ops,
    planned_counts,
    run_cli,
    weighted_metrics,
)

__all__ = [
    "Dataset",
    "DivergenceError",
    "Error",
    "IoError",
    "Model",
    "ShapeError",
    "ValueError",
    "default_config",
    "embed",
    "knn_purity",
    "ops",
    "planned_counts",
    "run_cli",
    "weighted_metrics",
]
