"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class DegenerateChannelError(ValueError):
    """Channel synthesis produced an all-zero vector; normalization undefined."""


class NumericalError(RuntimeError):
    """A numerical routine failed (rank deficiency, divergence, ...)."""


class TrainingDiverged(RuntimeError):
    """Training loss became NaN/Inf; last good checkpoint was preserved."""
