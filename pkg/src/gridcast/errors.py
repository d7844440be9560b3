"""Exception hierarchy shared by all gridcast modules.

The CLI maps these onto exit codes: invalid input/config -> 1, I/O -> 2,
data problems (bad files, missing history, missing keys) -> 3, numeric
failures -> 4.
"""


class GridcastError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(GridcastError):
    """An argument violates a documented precondition (shape, range, bounds)."""


class InvalidConfigError(GridcastError):
    """A configuration value is illegal (bad range, even window, phase order)."""


class CoverageError(InvalidConfigError):
    """A tile layout cannot cover the grid with the fixed five-rect plan."""


class DataError(GridcastError):
    """Stored or supplied data is unusable."""


class FormatError(DataError):
    """A binary file has a bad magic, version, or header field."""


class TruncationError(FormatError):
    """A binary file declares more payload than it contains."""


class InvalidHeadingError(InvalidInputError, DataError):
    """A byte that is not one of the five legal heading codes."""


class InsufficientHistoryError(DataError):
    """A feature request needs frames that the archive cannot supply."""


class NotFoundError(DataError):
    """A (city, day) or (city, subtask, subregion) key is absent."""


class NumericError(GridcastError):
    """A non-finite value surfaced where training must halt."""


class StateError(GridcastError):
    """An operation ran out of order (e.g. backward without a cached forward)."""
