"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes; message names both."""


class ContractViolation(ValueError):
    """A documented precondition was violated by the caller."""


class CheckpointFormatError(ValueError):
    """File is not a recognized checkpoint (bad magic, garbled header)."""


class UnsupportedVersionError(CheckpointFormatError):
    """File was written by a newer format version than this reader supports."""


class FileIntegrityError(ValueError):
    """File is structurally recognized but truncated or inconsistent."""


class NumericFailure(RuntimeError):
    """Training aborted on a non-finite value.

    Attributes:
        parameter: name of the offending parameter, if known.
        epoch: epoch index at which the blow-up occurred, if known.
    """

    def __init__(self, message, parameter=None, epoch=None):
        super().__init__(message)
        self.parameter = parameter
        self.epoch = epoch


class ConfigError(ValueError):
    """Run configuration is invalid; message names the field."""
