"""Task consistency training for volumetric segmentation from partially labeled data."""

from tctseg.errors import (
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    GenerationError,
    NonFiniteError,
    ShapeError,
    TCTError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DomainError",
    "FormatError",
    "GenerationError",
    "NonFiniteError",
    "ShapeError",
    "TCTError",
    "__version__",
]
