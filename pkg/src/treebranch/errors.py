"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A config, input, or file failed validation before any real work ran."""


class ArchiveError(ValidationError):
    """A parameter archive is malformed or incompatible with its target."""
