"""Exception hierarchy shared by every module."""

import numpy as np


class DRFError(Exception):
    """Base class for all package errors."""


class ConfigError(DRFError, ValueError):
    """Invalid configuration value.

    ``field`` carries the dotted path of the offending setting when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DimensionError(DRFError, ValueError):
    """Array shapes that must agree do not."""


class NumericError(DRFError, ArithmeticError):
    """Non-finite values or a singular coefficient.

    ``step`` and ``iteration`` locate the failure inside a sampling run.
    """

    def __init__(self, message, step=None, iteration=None):
        self.step = step
        self.iteration = iteration
        where = []
        if step is not None:
            where.append(f"step {step}")
        if iteration is not None:
            where.append(f"iteration {iteration}")
        suffix = f" (at {', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class ScheduleError(NumericError):
    """A schedule coefficient left its admissible range."""


class StateError(DRFError, RuntimeError):
    """An operation was called with missing or inconsistent state."""


class TrainingDivergence(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


def check_same_shape(a, b, what="arrays"):
    if a.shape != b.shape:
        raise DimensionError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def check_finite(x, what, step=None, iteration=None):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}", step=step, iteration=iteration)


class HookError(DRFError, RuntimeError):
    """A per-step hook raised; ``step`` locates it."""

    def __init__(self, message, step):
        self.step = step
        super().__init__(f"{message} (at step {step})")
