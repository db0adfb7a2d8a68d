"""Exception hierarchy shared across the package."""


class SepnetError(Exception):
    """Base class for all package errors."""


class ConfigError(SepnetError):
    """Invalid configuration value or combination."""


class ShapeError(SepnetError):
    """Tensor shape mismatch; message names the offending dimension."""


class UninitializedStatsError(SepnetError):
    """Batch-norm eval requested before any statistics were recorded."""


class NumericsError(SepnetError):
    """Non-finite value where a finite one is required."""


class FramingError(SepnetError):
    """Corrupt or truncated wire message.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ChecksumError(SepnetError):
    """Checkpoint blob failed its CRC check; message names the blob."""


class HandshakeError(SepnetError):
    """Peer handshake failed (bad magic, version, or policy hash)."""


class PeerFailureError(SepnetError):
    """A peer died or timed out mid-inference; message names the step."""
