"""Rotation-invariant semantic place descriptors from LiDAR local maps."""

from .errors import InputError, NumericError, SemsphereError

__version__ = "0.1.0"

__all__ = ["InputError", "NumericError", "SemsphereError", "__version__"]
