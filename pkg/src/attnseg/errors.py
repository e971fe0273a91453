"""Exception types shared across the package."""


class AttnSegError(Exception):
    """Base class for package errors."""


class ConfigurationError(AttnSegError, ValueError):
    """Invalid configuration or parameter values."""


class ShapeError(AttnSegError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class DegenerateInputError(AttnSegError, ValueError):
    """Statistical input without the variability a test requires."""


class TrainingDivergence(AttnSegError, RuntimeError):
    """A training loss became non-finite."""
