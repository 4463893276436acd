class BridgeTSError(Exception):
    """Base class for package errors."""


class DataError(BridgeTSError, ValueError):
    """Malformed input data, files or shapes."""


class ConfigError(BridgeTSError, ValueError):
    """Invalid configuration or incompatible checkpoint."""


class NumericalError(BridgeTSError, FloatingPointError):
    """Non-finite loss, gradient or model output."""
