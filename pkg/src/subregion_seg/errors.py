class InvalidInputError(ValueError):
    """Raised when an array or argument violates an operation's preconditions."""


class ArchiveFormatError(ValueError):
    """Raised when a case archive or checkpoint file is malformed.

    The offending key is kept on ``key`` so callers can report it.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ConfigError(ValueError):
    """Raised for invalid model/train/phantom configurations."""
