"""Unpaired image deblurring with decoupled structure and blur representations."""
from .errors import ConfigurationError, IntegrityError, NumericError, PhaseOrderError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "IntegrityError", "NumericError", "PhaseOrderError", "__version__"]
