"""Exception hierarchy shared across the package."""


class ChexFusionError(Exception):
    """Base class for all package errors."""


class ShapeError(ChexFusionError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(ChexFusionError, ValueError):
    """Invalid or unknown configuration value."""


class ValidationError(ChexFusionError, ValueError):
    """A manifest row or field failed validation."""


class SchemaError(ValidationError):
    """The manifest header is missing a required column."""


class SplitError(ChexFusionError, ValueError):
    pass


class OptimizerError(ChexFusionError, FloatingPointError):
    pass


class TrainingError(ChexFusionError, FloatingPointError):
    pass


class CheckpointError(ChexFusionError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class UndefinedAUROCError(ChexFusionError, ValueError):
    """AUROC needs at least one positive and one negative."""


class GradCheckError(ChexFusionError):
    """Gradient check could not find a kink-free sample point."""


class ImageLoadError(ChexFusionError, OSError):
    """An image file is missing or cannot be decoded."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
