"""Differentiable nonparametric belief propagation for articulated keypoint tracking."""

from ._core import (
    RENDER_SIZE,
    DataError,
    Error,
    Model,
    NumericError,
    ShapeError,
    UsageError,
    config_keys,
    evaluate,
    generate_dataset,
    pendulum_keypoints,
    pixel_error,
    read_sequence,
    simulate_sequence,
    train,
)

__all__ = [
    "RENDER_SIZE",
    "DataError",
    "Error",
    "Model",
    "NumericError",
    "ShapeError",
    "UsageError",
    "config_keys",
    "evaluate",
    "generate_dataset",
    "pendulum_keypoints",
    "pixel_error",
    "read_sequence",
    "simulate_sequence",
    "train",
]
