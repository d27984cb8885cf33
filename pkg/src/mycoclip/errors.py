"""Exception types raised across the pipeline."""


class MycoError(Exception):
    """Base class for all package errors."""


class ConfigError(MycoError, ValueError):
    pass


class ParameterError(ConfigError):
    pass


class DimensionError(MycoError, ValueError):
    pass


class RangeError(MycoError, ValueError):
    pass


class ShapeError(DimensionError):
    pass


class StateError(MycoError, ValueError):
    pass


class SizeError(MycoError, ValueError):
    pass


class DataError(MycoError, ValueError):
    pass


class NumericError(MycoError, ArithmeticError):
    pass


class ContractError(MycoError, ValueError):
    pass


class IntegrityError(MycoError):
    def __init__(self, path, expected, actual):
        super().__init__(f"checksum mismatch for {path}: expected {expected}, got {actual}")
        self.path = path
        self.expected = expected
        self.actual = actual


class ProviderError(MycoError):
    pass


class ParseError(ProviderError):
    def __init__(self, message, raw_body=""):
        super().__init__(message)
        self.raw_body = raw_body
