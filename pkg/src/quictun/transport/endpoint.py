"""UDP endpoints: demultiplex datagrams onto transport connections.

A listener owns one unconnected socket and spawns a server-side
Connection per previously-unseen source address; a client endpoint owns
one connected socket carrying exactly one Connection.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import ssl
from collections import deque

from ..errors import HandshakeError
from . import wire
from .connection import Connection, TransportSettings

log = logging.getLogger("quictun.transport")

SOCKET_BUFFER_BYTES = 1 << 23


def _tune_socket(transport: asyncio.DatagramTransport) -> None:
    sock = transport.get_extra_info("socket")
    if sock is None:
        return
    for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
        try:
            sock.setsockopt(socket.SOL_SOCKET, opt, SOCKET_BUFFER_BYTES)
        except OSError:
            pass


class _ListenerProtocol(asyncio.DatagramProtocol):
    def __init__(self, listener: "Listener"):
        self._listener = listener

    def connection_made(self, transport):
        _tune_socket(transport)

    def datagram_received(self, data, addr):
        self._listener._on_datagram(data, addr)

    def error_received(self, exc):
        log.debug("listener socket error: %s", exc)


class Listener:
    """Accepts transport connections on a bound UDP address."""

    def __init__(self, ssl_context: ssl.SSLContext, settings: TransportSettings):
        self._ssl_context = ssl_context
        self._settings = settings
        self._transport: asyncio.DatagramTransport | None = None
        self._connections: dict[tuple[str, int], Connection] = {}
        self._accept_queue: deque[Connection] = deque()
        self._accept_event = asyncio.Event()
        self._closed = False
        self.local_addr: tuple[str, int] | None = None

    def _on_datagram(self, data: bytes, addr) -> None:
        addr = (addr[0], addr[1])
        conn = self._connections.get(addr)
        if conn is not None:
            conn.datagram_received(data)
            return
        if self._closed:
            return
        try:
            packet_type, _, _ = wire.decode_header(data)
        except wire.WireFormatError:
            return
        if packet_type == wire.PACKET_DATA:
            return  # no session keys for an unknown peer; drop
        conn = Connection(
            is_client=False,
            ssl_context=self._ssl_context,
            peer_addr=addr,
            send_fn=self._send,
            settings=TransportSettings(**vars(self._settings)),
            on_established=self._on_conn_established,
            on_closed=self._on_conn_closed,
        )
        self._connections[addr] = conn
        conn.start()
        conn.datagram_received(data)

    def _send(self, data: bytes, addr) -> None:
        if self._transport is not None and not self._transport.is_closing():
            self._transport.sendto(data, addr)

    def _on_conn_established(self, conn: Connection) -> None:
        self._accept_queue.append(conn)
        self._accept_event.set()

    def _on_conn_closed(self, conn: Connection) -> None:
        self._connections.pop(conn.peer_addr, None)

    async def accept(self) -> Connection:
        """Wait for the next fully-established connection."""
        while True:
            if self._accept_queue:
                return self._accept_queue.popleft()
            if self._closed:
                raise ConnectionError("listener closed")
            self._accept_event.clear()
            await self._accept_event.wait()

    @property
    def connection_count(self) -> int:
        return len(self._connections)

    def close(self) -> None:
        self._closed = True
        for conn in list(self._connections.values()):
            conn.close()
        if self._transport is not None:
            self._transport.close()
        self._accept_event.set()


async def listen(
    bind_addr: tuple[str, int],
    ssl_context: ssl.SSLContext,
    settings: TransportSettings | None = None,
) -> Listener:
    """Bind a UDP listener for incoming transport connections."""
    loop = asyncio.get_running_loop()
    listener = Listener(ssl_context, settings or TransportSettings())
    transport, _ = await loop.create_datagram_endpoint(
        lambda: _ListenerProtocol(listener), local_addr=bind_addr
    )
    listener._transport = transport
    sockname = transport.get_extra_info("sockname")
    listener.local_addr = (sockname[0], sockname[1])
    return listener


class _ClientProtocol(asyncio.DatagramProtocol):
    def __init__(self):
        self.conn: Connection | None = None

    def connection_made(self, transport):
        _tune_socket(transport)

    def datagram_received(self, data, addr):
        if self.conn is not None:
            self.conn.datagram_received(data)

    def error_received(self, exc):
        # ICMP port unreachable while the server is down; the handshake
        # timeout deals with it.
        log.debug("client socket error: %s", exc)


async def connect(
    remote_addr: tuple[str, int],
    ssl_context: ssl.SSLContext,
    settings: TransportSettings | None = None,
    server_hostname: str | None = None,
) -> Connection:
    """Dial a transport connection; returns once the handshake completes.

    The returned connection owns its UDP socket and closes it when the
    connection closes.
    """
    loop = asyncio.get_running_loop()
    settings = settings or TransportSettings()
    protocol = _ClientProtocol()
    transport, _ = await loop.create_datagram_endpoint(
        lambda: protocol, remote_addr=remote_addr
    )

    def send_fn(data: bytes, addr) -> None:
        if not transport.is_closing():
            transport.sendto(data)

    conn = Connection(
        is_client=True,
        ssl_context=ssl_context,
        peer_addr=remote_addr,
        send_fn=send_fn,
        settings=settings,
        server_hostname=server_hostname or remote_addr[0],
        on_closed=lambda c: transport.close(),
    )
    protocol.conn = conn
    conn.start()
    try:
        await conn.wait_established()
    except HandshakeError:
        conn.close()
        raise
    return conn
