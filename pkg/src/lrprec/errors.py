"""Exception types shared across the package."""


class LrprecError(Exception):
    pass


class DimensionError(LrprecError, ValueError):
    pass


class ConfigError(LrprecError, ValueError):
    pass


class IntegrityError(LrprecError):
    pass


class FormatError(LrprecError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(LrprecError, ArithmeticError):
    pass


class SamplingExhaustedError(LrprecError):
    pass


class IngestionError(LrprecError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SplitError(LrprecError, ValueError):
    pass


class EvaluationError(LrprecError, ValueError):
    pass


class AggregationError(LrprecError, ValueError):
    pass


class PerturbationRangeError(LrprecError, ValueError):
    pass


class UnknownKeyError(LrprecError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""
