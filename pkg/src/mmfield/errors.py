"""Exception types shared across the package."""


class MMFieldError(Exception):
    """Base class for all package errors."""


class ConfigError(MMFieldError):
    """A configuration value is out of range or inconsistent."""


class ModalityError(MMFieldError):
    """A field was queried with a modality it does not model."""


class CheckpointError(MMFieldError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class TrainingDiverged(MMFieldError):
    """Optimization produced non-finite values.

    Carries the name of the worst-offending parameter segment and,
    when available, the last loss breakdown.
    """

    def __init__(self, message, segment=None, parts=None):
        super().__init__(message)
        self.segment = segment
        self.parts = dict(parts) if parts else {}
