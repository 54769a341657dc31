"""Exception hierarchy shared by all modules.

Exit codes used by the CLI: 0 pass, 2 verification failure, 3 configuration
error, 4 internal error.
"""


class LsrmError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class ConfigurationError(LsrmError):
    """Invalid shapes, dimension chains, configs, or schema violations."""

    exit_code = 3


class VerificationError(LsrmError):
    """An oracle comparison or acceptance property failed."""

    exit_code = 2


class EmptyAttentionRowError(LsrmError):
    """A query row ended up with no attendable keys."""


class EmptyContextError(LsrmError):
    """Attention was requested against an empty key/value set."""


class OutOfDomainError(LsrmError):
    """A query point left the unit cube; callers must clamp explicitly."""


class BehindCameraError(LsrmError):
    """Projection of a point with non-positive camera-space depth."""


class ProtocolError(LsrmError):
    """A simulated collective detected inconsistent state across workers."""


class GoldenFormatError(LsrmError):
    """A golden-vector file failed to parse; carries the offending byte offset."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


def require(condition: bool, message: str) -> None:
    """Raise ConfigurationError unless condition holds."""
    if not condition:
        raise ConfigurationError(message)
