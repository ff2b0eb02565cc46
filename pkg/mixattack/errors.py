class MixAttackError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionError(MixAttackError, ValueError):
    """Tensor shapes that must agree do not."""


class ConfigurationError(MixAttackError):
    """Invalid configuration, unknown model id or unresolvable feature tap."""


class ArgumentError(MixAttackError, ValueError):
    """A call argument is outside the operation's contract."""


class CapacityError(MixAttackError, ValueError):
    """Not enough classes, images or rows for the requested operation."""


class UndefinedMetricError(MixAttackError, ZeroDivisionError):
    """A metric was requested over an empty set."""


class TrainingError(MixAttackError):
    """Reference model training diverged."""


class LoadError(MixAttackError, OSError):
    """A manifest or one of its files could not be loaded."""


class ExportError(MixAttackError, OSError):
    """An export could not be written; partial outputs were removed."""
