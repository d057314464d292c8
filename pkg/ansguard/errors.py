"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI reports for it.
"""


class AnsguardError(Exception):
    exit_code = 1


class ShapeError(AnsguardError, ValueError):
    """Operand dimensions do not agree."""


class ConfigError(AnsguardError, ValueError):
    """A parameter or configuration value is out of range."""


class TargetError(AnsguardError, IndexError):
    """A class target lies outside [0, classes)."""


class TapeError(AnsguardError, RuntimeError):
    """backward() called on something it cannot differentiate."""


class NonFiniteError(AnsguardError, FloatingPointError):
    """A gradient or loss contains NaN or Inf."""


class DivergenceError(AnsguardError):
    """Training produced a non-finite loss; parameters were rolled back."""

    def __init__(self, message: str, last_good_epoch: int) -> None:
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class FormatError(AnsguardError):
    """A binary file does not follow its declared layout."""


class LengthError(FormatError):
    """A binary file is shorter than its header promises."""


class DataMissingError(AnsguardError, FileNotFoundError):
    exit_code = 3


class PresetError(ConfigError):
    """Unknown attack preset name."""

    exit_code = 4


class CheckpointError(FormatError):
    exit_code = 5


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError, LengthError):
    pass


class UndefinedMetricError(AnsguardError, ValueError):
    """A metric is undefined for the given labels (e.g. single-class AUC)."""


class InsufficientDataError(AnsguardError):
    pass


class AcceptanceError(AnsguardError):
    """A --check gate failed."""

    exit_code = 6
