"""Exception types shared across the package."""

from __future__ import annotations


class PathwayError(ValueError):
    """A routing pathway or mask failed validation."""


class NumericError(RuntimeError):
    """A numeric invariant broke (non-finite activation, overflow, ...)."""


class StoreError(RuntimeError):
    """A reference store could not be built, parsed, or verified."""


class EmptyStoreError(StoreError):
    """Reference-set construction produced no entries."""


class DegenerateEmbeddingError(ValueError):
    """An input embedding had (near-)zero norm and cannot be normalized."""


class SerializationError(StoreError):
    """A persisted file is malformed or inconsistent with its header."""

    def __init__(self, message: str, *, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
