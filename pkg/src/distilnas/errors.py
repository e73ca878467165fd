"""Exception types raised across the package."""


class DistilnasError(Exception):
    """Base class for package errors."""


class SpaceValidationError(DistilnasError):
    """A search-space spec or architecture config is internally inconsistent."""


class DecodeError(DistilnasError):
    """A one-hot vector or text record does not decode to a valid object."""


class RemapError(DistilnasError):
    """Teacher/student pair violates the containment the remapping requires."""


class BudgetError(DistilnasError):
    """No candidate satisfied the cost constraint."""


class TaskDBError(DistilnasError):
    """A task database file is malformed or inconsistent with its header."""


class CheckpointError(DistilnasError):
    """A checkpoint archive is missing tensors or its manifest disagrees."""
