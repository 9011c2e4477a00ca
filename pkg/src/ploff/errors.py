"""Exception types shared across the package.

Validation failures (bad inputs, malformed files) and numerical failures
(non-convergence, divergence) are kept distinct so the CLI can map them to
different exit codes.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Malformed input: bad map, out-of-range parameter, dimension mismatch."""


class DataFormatError(ValidationError):
    """Corrupt or incompatible on-disk artifact (bad magic, version, truncation)."""


class ConvergenceError(RuntimeError):
    """Iteration budget exhausted before reaching the requested tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(RuntimeError):
    """Critic values escaped the admissible range during agent training."""

    def __init__(self, message: str, step: int | None = None, q_max: float | None = None):
        super().__init__(message)
        self.step = step
        self.q_max = q_max


class NonFiniteError(RuntimeError):
    """A loss or gradient became NaN/inf during training."""
