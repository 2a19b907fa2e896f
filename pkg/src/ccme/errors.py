"""Exception and warning types shared across the package.

The CLI maps these onto process exit codes, so estimator code should
raise the most specific type that applies rather than bare ValueError.
"""

from __future__ import annotations

__all__ = [
    "InvalidArgumentError",
    "DegenerateDataError",
    "NumericError",
    "ConfigError",
    "ConfigWarning",
]


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition (shape, range, emptiness)."""


class DegenerateDataError(ValueError):
    """Data cannot support the requested fit (e.g. no treated rows, single class)."""


class NumericError(RuntimeError):
    """A numerical procedure failed (factorization breakdown, non-finite loss).

    Carries optional context: ``pivot`` for factorization failures and
    ``epoch`` for training failures.
    """

    def __init__(self, message: str, *, pivot: int | None = None,
                 epoch: int | None = None) -> None:
        super().__init__(message)
        self.pivot = pivot
        self.epoch = epoch


class ConfigError(ValueError):
    """A run configuration is internally inconsistent."""


class ConfigWarning(UserWarning):
    """A configuration is legal but some options will be ignored."""
