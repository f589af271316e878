"""Exception types shared across the package."""


class CrabError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CrabError, ValueError):
    pass


class NumericError(CrabError, ArithmeticError):
    pass


class ContractError(CrabError, ValueError):
    """A caller broke a documented precondition."""


class ParseError(CrabError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(CrabError, ValueError):
    pass


class ConfigError(CrabError, ValueError):
    pass


class ModelFormatError(CrabError, ValueError):
    pass
