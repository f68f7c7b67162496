class FedalError(Exception):
    """Base class for all errors raised by fedal."""


class DimensionError(FedalError, ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(FedalError, RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigError(FedalError, ValueError):
    """Invalid configuration value or combination of values."""
