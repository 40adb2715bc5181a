"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Dimension or layout mismatch between arrays, layers or parameter vectors."""


class StateError(RuntimeError):
    """An operation was called before the state it depends on exists."""


class ConfigError(ValueError):
    """Invalid experiment, training or task configuration."""


class UnsupportedObjectiveError(ValueError):
    pass


class ParseError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset
