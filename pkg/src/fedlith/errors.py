"""Exception hierarchy shared across modules, mapped to CLI exit codes."""


class FedlithError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FedlithError):
    """Invalid config, shape mismatch, or malformed model spec (exit code 2)."""


class NumericError(FedlithError):
    """Non-finite value produced during compute (exit code 3)."""


class DataIOError(FedlithError):
    """Dataset or run-directory persistence failure (exit code 4)."""


class ProtocolError(FedlithError):
    """Federated round contract violated (missing responder in sync mode)."""


class UndefinedMetricError(FedlithError):
    """Metric denominator is zero (no positives / no negatives in the split)."""
