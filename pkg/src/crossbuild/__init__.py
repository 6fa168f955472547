"""Cross-building transfer learning for building load forecasting."""

from .errors import (
    AlignmentError,
    ContractError,
    CrossbuildError,
    DimensionError,
    IngestionError,
    LeakageError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "ContractError",
    "CrossbuildError",
    "DimensionError",
    "IngestionError",
    "LeakageError",
    "NumericError",
    "__version__",
]
