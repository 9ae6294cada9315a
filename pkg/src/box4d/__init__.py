"""Synthetic 4D box annotation toolkit: geometry, scene synthesis, annotation,
dataset I/O, differentiable losses, a causal sequence decoder and metrics."""

from .errors import (
    Box4DError,
    ConfigError,
    DimMismatch,
    EmptySet,
    InstanceMismatch,
    NonPositiveDepth,
    PlacementFailure,
    SchemaError,
)

__version__ = "0.1.0"

__all__ = [
    "Box4DError",
    "ConfigError",
    "DimMismatch",
    "EmptySet",
    "InstanceMismatch",
    "NonPositiveDepth",
    "PlacementFailure",
    "SchemaError",
]
