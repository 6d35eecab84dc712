"""Exception types shared across the package."""


class BssrError(Exception):
    """Base class for all package errors."""


class ShapeError(BssrError, ValueError):
    pass


class ParameterError(BssrError, ValueError):
    pass


class NumericError(BssrError, ArithmeticError):
    pass


class ConfigError(BssrError, ValueError):
    pass


class ContractError(BssrError, ValueError):
    """Arguments that are individually valid but were not produced together."""


class ParseError(BssrError, ValueError):
    pass


class SchemaError(BssrError, ValueError):
    pass


class CheckpointError(BssrError, ValueError):
    pass


class UndefinedMetricError(BssrError, ValueError):
    pass
