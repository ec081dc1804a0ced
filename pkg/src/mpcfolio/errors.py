"""Exception hierarchy shared by every module."""


class MpcFolioError(Exception):
    """Base class for all package errors."""


class ValidationError(MpcFolioError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """A returns file cell could not be parsed.

    ``row`` is the 1-based line number in the file (header is line 1) and
    ``column`` the header name of the offending cell.
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DegenerateRegimeError(MpcFolioError):
    """A fitted regime received too few labelled observations."""


class DegenerateRiskError(ValidationError):
    """Portfolio variance is (numerically) zero, risk contributions undefined."""


class NonConvergenceError(MpcFolioError):
    """An iterative solver hit its iteration cap.

    The best iterate found so far travels with the exception so callers can
    still inspect or use it.
    """

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best
        self.trace = trace


class WealthWipeoutError(MpcFolioError):
    """Portfolio return of -100% or worse within one period."""


class UndefinedMetricError(MpcFolioError):
    """A performance ratio has a zero denominator."""
