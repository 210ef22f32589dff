"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violated an operation's precondition."""


class FormatError(ValueError):
    """A file on disk does not match its documented layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """A run configuration failed schema validation.

    ``path`` is the dotted location of the offending field.
    """

    def __init__(self, message, path=""):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


class NonFiniteLossError(RuntimeError):
    pass
