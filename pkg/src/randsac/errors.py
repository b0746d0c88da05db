"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration 2, data 3, divergence 4.
"""


class ConfigurationError(ValueError):
    """A setting is invalid or mutually inconsistent."""


class DataFormatError(ValueError):
    """Input data does not match the expected on-disk format."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(RuntimeError):
    """An operation was called outside its documented preconditions."""


class PartitionRejected(RuntimeError):
    """A sampled partition realized fewer than two segments."""
