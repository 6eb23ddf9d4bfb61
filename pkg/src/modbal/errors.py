"""Exception hierarchy shared across the package."""


class ModbalError(Exception):
    """Base class for all errors raised by modbal."""


class ShapeError(ModbalError, ValueError):
    pass


class NumericError(ModbalError, ArithmeticError):
    pass


class ParseError(ModbalError, ValueError):
    """Malformed document; ``path`` names the offending location."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class ArgumentError(ModbalError, ValueError):
    """Argument outside its declared domain."""


class ValidationError(ModbalError, ValueError):
    pass


class ReallocationError(ModbalError, ValueError):
    pass


class OracleError(ModbalError, RuntimeError):
    pass


class RoutingError(ModbalError, ValueError):
    pass


class UndefinedMetricError(ModbalError, ValueError):
    pass
