"""Exception types shared across the package."""


class SmokepatchError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(SmokepatchError):
    """Grids, blocks or descriptors with incompatible shapes."""


class EmptyFieldError(SmokepatchError):
    """An operation that needs mass (e.g. center of mass) got an empty field."""


class DegenerateCellError(SmokepatchError):
    """A cage cell has collapsed edges or collinear neighbors."""


class FormatError(SmokepatchError):
    """A binary file has a bad magic, version or inconsistent layout."""


class TrainingDivergedError(SmokepatchError):
    """Loss became non-finite during training."""


class EmptyRepositoryError(SmokepatchError):
    """Synthesis was started against a repository with no entries."""


class ConfigError(SmokepatchError):
    """Unknown or malformed configuration key."""

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"invalid config key: {key}")
