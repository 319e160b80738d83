"""Interpretability measurements for knowledge-distilled CNNs on a synthetic shape dataset."""

__version__ = "0.1.0"

from .errors import ContractError, FormatError, KDError, ParameterError, ShapeError, ValidationError  # noqa: E402

__all__ = [
    "__version__",
    "KDError",
    "ShapeError",
    "ParameterError",
    "ValidationError",
    "ContractError",
    "FormatError",
]
