"""Exception hierarchy. The CLI maps each family to an exit code."""


class XappConflictError(Exception):
    """Base class for all package errors."""


class ConfigError(XappConflictError, ValueError):
    """Invalid pipeline configuration (exit code 2)."""


class DataError(XappConflictError, ValueError):
    """Invalid, inconsistent or missing data (exit code 3)."""


class DomainError(DataError):
    """A value lies outside the domain of the variable it is assigned to."""


class ParseError(DataError):
    """A persisted file could not be parsed.

    ``row`` and ``column`` locate the offending cell when known (rows are
    1-based file lines, header included).
    """

    def __init__(self, message, path=None, row=None, column=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{': '.join([', '.join(loc), message]) if loc else message}")
        self.path = path
        self.row = row
        self.column = column


class CycleError(DataError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("declared edges form a cycle: " + " -> ".join(map(str, self.cycle)))


class EstimationError(XappConflictError, RuntimeError):
    """A model or effect could not be estimated (exit code 4)."""
