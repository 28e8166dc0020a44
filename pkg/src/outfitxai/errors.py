"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class OutfitError(Exception):
    exit_code = 1


class UsageError(OutfitError):
    exit_code = 2


class DataIOError(OutfitError, OSError):
    exit_code = 3


class ModelFormatError(DataIOError):
    """Unreadable, truncated, corrupted or version-incompatible model file."""


class VersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class DimensionError(OutfitError, ValueError):
    exit_code = 4


class InvariantError(OutfitError, ValueError):
    exit_code = 5


class NoForegroundError(InvariantError):
    """Background removal left no foreground pixels."""


class InfeasibleSpecError(InvariantError):
    pass


class GradCheckError(InvariantError):
    def __init__(self, message, name=None, index=None, rel_err=None):
        super().__init__(message)
        self.name = name
        self.index = index
        self.rel_err = rel_err
