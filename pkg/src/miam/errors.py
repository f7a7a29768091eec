"""Exception types shared across the package."""


class MiamError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MiamError):
    """Operands have incompatible shapes."""


class InvalidInputError(MiamError):
    """Input violates a documented precondition."""


class ParseError(MiamError):
    """A raw record file could not be parsed."""


class SchemaError(MiamError):
    """A tabular input is missing required columns."""


class StratificationError(MiamError):
    """Fold assignment cannot satisfy the stratification contract."""


class ConfigError(MiamError):
    """Configuration values are inconsistent."""


class ContractError(MiamError):
    """An API contract was violated by the caller."""


class UndefinedMetricError(MiamError):
    """The requested metric is undefined for the given inputs."""
