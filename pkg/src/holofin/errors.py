"""Exception types shared across the package.

The CLI maps them to exit codes: configuration/geometry problems exit 2,
malformed files exit 3, numerical failures exit 4.
"""


class HolofinError(Exception):
    """Base class for package errors."""


class ConfigError(HolofinError, ValueError):
    """Invalid configuration or arguments."""


class GeometryError(ConfigError):
    """Grid shape, pixel pitch or wavelength mismatch."""


class FormatError(HolofinError, ValueError):
    """A data file is malformed or has the wrong magic/version."""


class NumericalError(HolofinError, ArithmeticError):
    """NaN/Inf appeared during a computation."""
