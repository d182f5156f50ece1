"""Secure multiplexed datagram transport underlying the tunnel."""

from .connection import Connection, ConnectionStats, TransportSettings
from .endpoint import Listener, connect, listen
from .streams import Stream

__all__ = [
    "Connection",
    "ConnectionStats",
    "TransportSettings",
    "Listener",
    "Stream",
    "connect",
    "listen",
]
