"""
Custom exceptions for the LCM-lookahead core layer.

These exceptions are raised by business logic and can be caught
by the CLI layer for appropriate error handling.
"""

from typing import Optional


class LookaheadError(Exception):
    """Base exception for all core layer errors."""
    pass


class ConfigurationError(LookaheadError):
    """Raised when a configuration value is invalid.

    The message always names the offending field.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(LookaheadError):
    """Raised when tensor shapes do not line up."""
    pass


class TimestepRangeError(LookaheadError, IndexError):
    """Raised when a timestep falls outside [0, T)."""
    pass


class StateError(LookaheadError):
    """Raised when a component is used before it is ready (untrained, unloaded)."""
    pass


class PromptValidationError(LookaheadError):
    """Raised when a token sequence does not follow the prompt grammar."""
    pass


class StageOrderError(LookaheadError):
    """Raised when a pipeline stage runs before its upstream artifacts exist."""
    pass


class ConfigHashMismatchError(LookaheadError):
    """Raised when an upstream artifact was produced under a different config."""
    pass


class CheckpointError(LookaheadError):
    """Raised when a checkpoint cannot be read or does not match the model."""
    pass


class DivergenceError(LookaheadError):
    """Raised when an optimization loop produces non-finite values."""

    def __init__(self, message: str, iteration: int, loss: Optional[float] = None):
        self.message = message
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"{message} (iteration={iteration}, loss={loss})")


class MetricGateError(LookaheadError):
    """Raised when a trained metric network misses its quality gate."""
    pass


class InvariantError(LookaheadError):
    """Raised when an internal invariant is violated (e.g. frozen weights received gradients)."""
    pass
