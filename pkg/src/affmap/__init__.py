"""Grounded affordance labels, multi-label post-processing, 3-D affordance maps and navigation."""

from .errors import AffMapError, ConfigError, DataError, InvariantViolation

__version__ = "0.1.0"
__all__ = ["AffMapError", "ConfigError", "DataError", "InvariantViolation", "__version__"]
