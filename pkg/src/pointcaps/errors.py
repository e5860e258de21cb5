"""Exception types shared across the package."""


class PointCapsError(Exception):
    """Base class for every error raised deliberately by pointcaps."""


class DimensionError(PointCapsError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(PointCapsError, ValueError):
    """An input lies outside the domain of an operation (empty axis, degenerate cloud, ...)."""


class NumericError(PointCapsError, ArithmeticError):
    """NaN or inf reached a place where it must not."""


class ParseError(PointCapsError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class SchemaError(PointCapsError, ValueError):
    """Dataset layout or file content does not match the declared schema."""


class ConfigError(PointCapsError, ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class CheckpointError(PointCapsError):
    """Checkpoint is missing, unreadable, or built for a different architecture."""


class TrainingDiverged(PointCapsError):
    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)


class UsageError(PointCapsError, ValueError):
    """A function was called in a way its contract forbids."""
