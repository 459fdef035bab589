"""Exception hierarchy shared by every stage."""


class RegCDError(Exception):
    """Base class for all errors raised by this package."""


class DecodeError(RegCDError):
    """Image file could not be decoded."""


class ConfigError(RegCDError):
    """Invalid configuration value."""


class ContractError(RegCDError):
    """A precondition of an operation was violated by its inputs."""


class AssemblyError(RegCDError):
    """Tiles do not form a complete grid."""


class GeometryError(RegCDError):
    """Singular transform or point mapped to the line at infinity."""


class InsufficientDataError(GeometryError):
    """Too few correspondences for the requested fit."""


class DegeneracyError(GeometryError):
    """Correspondences do not constrain a unique homography."""


class EstimationError(GeometryError):
    """Robust estimation found no acceptable model."""


class PluginError(RegCDError):
    """External matcher or segmenter failed."""


class NumericError(RegCDError, ArithmeticError):
    """Non-finite values where finite samples are required."""
