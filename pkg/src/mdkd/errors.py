"""Exception hierarchy shared across the package."""


class MdkdError(Exception):
    """Base class for all package errors."""


class ShapeError(MdkdError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(MdkdError):
    """A caller violated a documented precondition."""


class ConfigError(MdkdError):
    """Invalid or contradictory configuration."""


class DataError(MdkdError):
    """Malformed or out-of-range input data."""


class NumericError(MdkdError):
    """A numeric guard tripped (zero norm, non-finite value, ...)."""
