"""Exception hierarchy.

Every failure mode the library can report deliberately maps onto one of
these classes so callers (and the CLI exit-code mapping) can categorize
errors without string matching.
"""


class CamobrewError(Exception):
    """Base class for all library errors."""


class ConfigError(CamobrewError):
    """Invalid configuration: bad values, unknown keys, violated preconditions."""


class BudgetError(ConfigError):
    """A requested poison/camouflage budget exceeds the available class pool."""

    def __init__(self, message: str, class_label=None, needed=None, available=None):
        super().__init__(message)
        self.class_label = class_label
        self.needed = needed
        self.available = available


class DataError(CamobrewError):
    """Malformed or inconsistent input data."""


class FileFormatError(DataError):
    """A persisted artifact does not match its documented format."""

    def __init__(self, message: str, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class ModelError(CamobrewError):
    """Model evaluation failure (dimension mismatch, non-finite values)."""

    def __init__(self, message: str, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingDivergedError(ModelError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step=None):
        super().__init__(message)
        self.step = step


class DegenerateGradientError(CamobrewError):
    """A gradient required to be nonzero had zero norm."""
