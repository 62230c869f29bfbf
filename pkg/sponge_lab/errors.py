"""
Exception hierarchy for sponge-lab.

Every error raised by the library derives from SpongeError so callers (the CLI,
the MCP service, sweep workers) can catch library failures without swallowing
programming errors.
"""


class SpongeError(Exception):
    """Base class for all sponge-lab errors."""


class ShapeError(SpongeError, ValueError):
    """Tensor or layer extents do not compose."""


class NonFiniteError(SpongeError, FloatingPointError):
    """An operation produced NaN or Inf."""


class NonFiniteGradientError(NonFiniteError):
    """A training step produced non-finite gradients.

    Attributes:
        parameters: names of the parameters whose gradient is not finite
    """

    def __init__(self, message: str, parameters: list[str]):
        super().__init__(message)
        self.parameters = parameters


class LabelError(SpongeError, ValueError):
    """A class index is outside [0, num_classes)."""


class ConfigError(SpongeError, ValueError):
    """Invalid configuration value."""


class DatasetFormatError(SpongeError, ValueError):
    """A dataset file does not follow its binary layout."""


class CheckpointError(SpongeError, ValueError):
    """A checkpoint file is malformed or from an unsupported version."""


class ArchitectureMismatchError(SpongeError, ValueError):
    """Two reports or models do not describe the same architecture."""


class ReportWriteError(SpongeError, OSError):
    """A report could not be written.

    Attributes:
        path: the file that failed
    """

    def __init__(self, path: str, reason: str):
        super().__init__(f"failed to write {path}: {reason}")
        self.path = path
