"""Exception types shared across the package.

Every failure mode callers are expected to handle has its own class so the
CLI can map them onto stable exit codes (config errors -> 2, numeric
failures -> 3, file-format problems -> 4).
"""


class DlmscopeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DlmscopeError, ValueError):
    """Operands have incompatible or invalid shapes."""


class DegenerateRowError(DlmscopeError, ValueError):
    """A softmax row contains no finite entry."""


class EmptyLossError(DlmscopeError, ValueError):
    """Loss requested over an empty position set or zero total weight."""


class DivergenceError(DlmscopeError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class InvalidOverrideError(DlmscopeError, ValueError):
    """An attention-logit override addresses an out-of-range layer/head/position."""


class MalformedAttentionError(DlmscopeError, ValueError):
    """An attention matrix is not row-stochastic within tolerance."""


class ConfigError(DlmscopeError, ValueError):
    """A run, model, or decode configuration is invalid or contains unknown keys."""


class SchedulingError(DlmscopeError, ValueError):
    """An unmasking schedule cannot be satisfied."""


class TraceFormatError(DlmscopeError, ValueError):
    """A trace file has a bad magic, version, or payload that violates invariants."""


class TraceTruncationError(TraceFormatError):
    """A trace file ended before its payload was complete."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte offset {byte_offset})")
        self.byte_offset = byte_offset


class SparseImportError(DlmscopeError, ValueError):
    """An imported score CSV does not cover the full (step, layer, head, position) grid."""
