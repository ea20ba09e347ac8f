"""Exception hierarchy shared by every rankseg module."""

from __future__ import annotations


class RankSegError(RuntimeError):
    """Base class for all errors raised by rankseg."""


class ShapeError(RankSegError, ValueError):
    """Raised when operand shapes do not satisfy an operation's shape rule."""


class NonFiniteError(RankSegError):
    """Raised when a NaN or Inf appears in a forward or backward result."""


class TapeError(RankSegError):
    """Raised for misuse of a Tape (foreign loss, non-scalar loss, replay)."""


class GradientError(RankSegError):
    """Raised when the optimizer finds parameters without gradients."""


class PrecisionError(RankSegError):
    """Raised when an operation needs a precision the tensors do not have."""


class DegenerateEmbeddingError(RankSegError):
    """Raised when an embedding row has (near) zero norm and cannot be normalised."""


class SelectionError(RankSegError, ValueError):
    """Raised for invalid label selection requests."""


class MetricError(RankSegError, ValueError):
    """Raised when a metric has nothing to average over."""


class ConfigError(RankSegError):
    """Raised for invalid, unknown, or missing configuration values."""


class RetryLimitError(ConfigError):
    """Raised when synthetic rendering cannot satisfy its constraints."""


class DatasetFormatError(RankSegError):
    """Raised when a dataset file does not match the RSEG1 layout."""


class DivergenceError(RankSegError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, step: int, detail: str = "") -> None:
        self.step = step
        message = f"Training diverged at step {step}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


__all__ = [
    "ConfigError",
    "DatasetFormatError",
    "DegenerateEmbeddingError",
    "DivergenceError",
    "GradientError",
    "MetricError",
    "NonFiniteError",
    "PrecisionError",
    "RankSegError",
    "RetryLimitError",
    "SelectionError",
    "ShapeError",
    "TapeError",
]
