"""Part-tree shapes, shape deltas, and a source-conditioned delta VAE."""

__version__ = "0.1.0"

from .delta import (  # noqa: E402
    DELETE,
    Addition,
    DeltaError,
    PartDelta,
    ShapeDelta,
    apply_delta,
    compute_delta,
    match_shapes,
    read_delta,
    write_delta,
)
from .shape import Part, ShapeError, ShapeTree, Taxonomy, load_taxonomy, read_shape, write_shape  # noqa: E402

__all__ = [
    "DELETE", "Addition", "DeltaError", "PartDelta", "ShapeDelta", "apply_delta", "compute_delta",
    "match_shapes", "read_delta", "write_delta", "Part", "ShapeError", "ShapeTree", "Taxonomy",
    "load_taxonomy", "read_shape", "write_shape",
]
