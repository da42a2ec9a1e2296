"""Exception types shared across the package."""


class UrbanRepError(Exception):
    """Base class for all package errors."""


class ParseError(UrbanRepError):
    """A data file row could not be parsed. Carries the 1-based line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class ReferentialError(UrbanRepError):
    """An edge or flow references a node id that does not exist."""


class SchemaError(UrbanRepError):
    """A node/edge violates the urban graph schema."""


class PatternError(UrbanRepError):
    """A graph pattern is malformed or incompatible with a query."""


class UnknownNodeError(UrbanRepError):
    """A queried node id is not present in the graph."""


class InvalidSpecError(UrbanRepError):
    """A synthetic city spec is degenerate (e.g. zero regions)."""


class UntrainableError(UrbanRepError):
    """Training was requested on data that cannot support it."""


class ConfigError(UrbanRepError):
    """An invalid run or model configuration."""


class MissingViewError(UrbanRepError):
    """A view input (e.g. image feature list) required by an operation is empty."""
