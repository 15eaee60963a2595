class UsageError(ValueError):
    """Invalid arguments, shapes or configuration supplied by the caller."""


class FormatError(ValueError):
    """A persisted document (dataset, checkpoint, config) could not be parsed."""
