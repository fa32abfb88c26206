"""Exceptions shared across modules."""


class ParameterError(ValueError):
    """An argument or configuration field is out of its valid range."""


class FormatError(ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class EmptyBagError(ValueError):
    """A bag with no instances reached an operation that needs at least one."""
