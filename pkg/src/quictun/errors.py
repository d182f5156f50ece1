"""Exception hierarchy shared across the tunnel, impairer and benchmark."""


class QuicTunError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(QuicTunError, ValueError):
    """Invalid configuration value or malformed config file."""


class UndefinedStatisticError(QuicTunError, ArithmeticError):
    """A rate or percentage was requested with a zero denominator."""


class HandshakeError(QuicTunError):
    """The secure transport handshake failed (after any retries)."""


class ConnectionClosedError(QuicTunError):
    """Operation attempted on a transport connection that is closed."""

    def __init__(self, message: str = "connection closed", error_code: int = 0):
        super().__init__(message)
        self.error_code = error_code


class StreamResetError(QuicTunError):
    """The peer reset this stream with an application error code."""

    def __init__(self, error_code: int, message: str = ""):
        super().__init__(message or f"stream reset (error code 0x{error_code:02x})")
        self.error_code = error_code


class StreamLimitError(QuicTunError):
    """No stream slot became free within the acquisition wait timeout."""


class RelayError(QuicTunError):
    """One side of a relay failed mid-transfer.

    ``endpoint_label`` names the failing endpoint, ``operation`` is
    ``"read"`` or ``"write"``.
    """

    def __init__(self, endpoint_label: str, operation: str, cause: BaseException):
        super().__init__(f"{operation} failed on {endpoint_label}: {cause!r}")
        self.endpoint_label = endpoint_label
        self.operation = operation
        self.cause = cause


class ScenarioError(QuicTunError):
    """A benchmark scenario could not be set up or run."""
