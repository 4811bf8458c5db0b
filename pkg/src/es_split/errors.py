"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    """A metric has no defined value on the given input (e.g. no edges)."""


class CapacityError(ValueError):
    """Not enough candidates to satisfy a sampling request."""


class ParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ValidationError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
