"""Exception classes shared across the toolkit.

The CLI maps these onto distinct exit codes, so raise the most specific
one that applies.
"""


class ValidationError(ValueError):
    """Invalid arguments, shapes, ranges, or configuration."""


class ConvergenceError(RuntimeError):
    """An iterative fit or training run failed to produce a usable result."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
