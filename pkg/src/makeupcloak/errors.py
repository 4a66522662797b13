"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration value or input layout is invalid; the run cannot start."""


class CheckpointIntegrityError(RuntimeError):
    """A checkpoint file is truncated, corrupt, or fails its checksum."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    Carries the path of the last good checkpoint (or None) so the operator
    can resume from it.
    """

    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
