"""Exception hierarchy shared across the package."""


class PDQATError(Exception):
    """Base class for all errors raised by pdqat."""


class DimensionError(PDQATError, ValueError):
    """Tensor shapes do not line up."""


class StateError(PDQATError, RuntimeError):
    """An operation was called before the state it depends on exists."""


class ContractError(PDQATError, ValueError):
    """An input violates a documented precondition."""


class InputError(PDQATError, ValueError):
    """Bad user-level argument (label range, unknown layer id, empty set...)."""


class FormatError(PDQATError, ValueError):
    """A file on disk is malformed.

    ``offset`` is the byte offset (binary formats) or line number (text
    formats) where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class ConfigError(PDQATError, ValueError):
    """Run configuration could not be parsed or validated."""


class NumericError(PDQATError, ArithmeticError):
    """A non-finite value showed up in training."""
