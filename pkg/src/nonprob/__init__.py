"""Finite-population mean estimation from a non-probability sample
integrated with a design-weighted probability sample."""

from .errors import (
    ConvergenceError,
    DegenerateModelError,
    InsufficientDataError,
    ParseError,
    SeparationError,
    SingularMatrixError,
    ValidationError,
)
from .sample import CombinedSample, PositivityConfig, Schema, UnitRecord, design_matrix, load_csv, validate

__version__ = "0.1.0"

__all__ = [
    "CombinedSample",
    "PositivityConfig",
    "Schema",
    "UnitRecord",
    "design_matrix",
    "load_csv",
    "validate",
    "ConvergenceError",
    "DegenerateModelError",
    "InsufficientDataError",
    "ParseError",
    "SeparationError",
    "SingularMatrixError",
    "ValidationError",
]
