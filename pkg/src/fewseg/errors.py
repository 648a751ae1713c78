"""Exception taxonomy shared by every module.

The CLI maps these onto its exit codes: usage/config problems exit 1,
data/format problems exit 2, numeric failures exit 3.
"""


class FewsegError(Exception):
    """Base class for all package errors."""


class ShapeError(FewsegError):
    """Operands have incompatible or unexpected dimensions."""


class ConfigError(FewsegError):
    """A configuration value is out of its legal range."""


class DataError(FewsegError):
    """Input data violates a contract (non-binary mask, NaN, empty mask...)."""


class FormatError(FewsegError):
    """A container file or manifest failed to parse.

    `offset` carries the byte position of the problem when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingError(FewsegError):
    """An episode could not be drawn from the manifest."""


class NumericError(FewsegError):
    """A non-finite value appeared where the pipeline requires finite math."""


class StateError(FewsegError):
    """An operation was called out of order (e.g. backward before forward)."""
