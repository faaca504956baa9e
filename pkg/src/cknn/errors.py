"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so estimator code should raise
the most specific class that applies rather than bare ValueError.
"""

from __future__ import annotations

__all__ = [
    "CknnError",
    "SchemaError",
    "ValidationError",
    "DomainError",
    "CapacityError",
    "DegenerateDesignError",
    "CollinearityError",
    "ConvergenceError",
    "AlignmentError",
    "SpecError",
]


class CknnError(Exception):
    """Base class for all package errors."""


class SchemaError(CknnError):
    """Input file is malformed: missing columns, duplicate ids, bad types."""


class ValidationError(CknnError):
    """Data violates a frame invariant (non-binary flag, missing response, ...)."""


class DomainError(CknnError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class CapacityError(CknnError):
    """Not enough units to satisfy a request (donor pool smaller than k, ...)."""


class DegenerateDesignError(CknnError):
    """Sampling design cannot support the estimator (e.g. no sampled unit outside the big data)."""


class CollinearityError(CknnError):
    """Design matrix is rank deficient; carries the offending column names."""

    def __init__(self, message: str, columns: list[str] | None = None):
        super().__init__(message)
        self.columns = columns or []


class ConvergenceError(CknnError):
    """Iterative fit failed to converge; carries the iteration trace."""

    def __init__(self, message: str, trace: list[float] | None = None):
        super().__init__(message)
        self.trace = trace or []


class AlignmentError(CknnError):
    """Per-area inputs do not cover the same set of areas."""


class SpecError(CknnError):
    """Synthetic-population specification is infeasible."""
