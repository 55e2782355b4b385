"""Exception hierarchy shared across the package."""


class CltvError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CltvError):
    """Invalid configuration; ``path`` names the offending field."""

    exit_code = 2

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class MissingArtifactError(CltvError):
    """An upstream artifact is absent; ``producer`` is the subcommand that writes it."""

    exit_code = 3

    def __init__(self, artifact, producer):
        self.artifact = artifact
        self.producer = producer
        super().__init__(
            f"missing artifact {artifact!s}; run `cltv {producer}` first"
        )


class DataError(CltvError):
    """Input data violates a schema or domain invariant."""

    exit_code = 4


class EmptyCohortError(DataError):
    """No customer has any event inside the feature window."""
