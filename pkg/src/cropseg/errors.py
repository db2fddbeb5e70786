"""Exception types shared across the package.

Plain argument misuse raises ValueError and unknown-name lookups raise
KeyError; the classes below cover the failure modes that callers (CLI,
benchmark runner) need to tell apart for exit codes.
"""


class ConfigError(Exception):
    """Invalid or inconsistent configuration; detected before any compute."""


class DataIntegrityError(Exception):
    """Dataset directory or manifest violates the on-disk contract."""


class ShapeError(ValueError):
    """Tensor arguments have incompatible shapes."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; message carries epoch and step."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
