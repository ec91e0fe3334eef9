class CtScatterError(Exception):
    """Base class for all package errors."""


class ValidationError(CtScatterError, ValueError):
    """Input or configuration violates a documented invariant."""


class TableParseError(ValidationError):
    def __init__(self, source, lineno, message):
        self.source = str(source)
        self.lineno = lineno
        super().__init__(f"{source}:{lineno}: {message}")


class EnergyRangeError(CtScatterError, ValueError):
    """Energy outside the tabulated range; tables are never extrapolated."""


class DomainError(CtScatterError, ValueError):
    pass


class SimulationError(CtScatterError, RuntimeError):
    pass
