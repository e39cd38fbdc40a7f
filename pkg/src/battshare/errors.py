"""Exception hierarchy. Every library error derives from BattShareError."""


class BattShareError(Exception):
    """Base class for domain and validation failures (CLI exit code 1)."""


class StructuralError(BattShareError):
    """Array shapes or state counts are inconsistent."""


class ValidationError(BattShareError):
    """A model failed one of the named checks."""

    def __init__(self, message, check=None, state=None):
        super().__init__(message)
        self.check = check
        self.state = state


class NumericalError(BattShareError):
    """A solver failed to converge or produced an unacceptable residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CapacityError(BattShareError):
    """A problem exceeds a configured size cap."""


class DomainError(BattShareError):
    """Inputs are outside the mathematical domain of an operation."""


class ParseError(BattShareError):
    """An input file does not match its schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CadenceError(ParseError):
    """Timestamps are not evenly spaced at the declared cadence."""


class AlignmentError(BattShareError):
    """Traces cannot be combined on a common time grid."""
