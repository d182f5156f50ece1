"""Per-stream send/receive state for the multiplexed transport.

A stream delivers an ordered byte sequence in each direction with
half-close (FIN at a final offset) and abrupt reset.  The send side
hands contiguous slices to the connection's packetizer; slices stay
referenced by the recovery machinery until acknowledged so a lost
packet's payload can be requeued byte-for-byte.  The receive side
reassembles out-of-order slices and enforces its flow-control window.
"""

from __future__ import annotations

import asyncio
from collections import deque
from typing import TYPE_CHECKING

from ..errors import ConnectionClosedError, StreamResetError

if TYPE_CHECKING:
    from .connection import Connection

SEND_BUF_HIGH_WATER = 256 * 1024
SEND_BUF_LOW_WATER = 128 * 1024

# Default application error code used when a relay adapter aborts a
# stream without a more specific cause.
ABORT_ERROR_CODE = 0x02


def is_client_initiated(stream_id: int) -> bool:
    return stream_id % 4 == 0


class Stream:
    """One bidirectional stream; satisfies the relay's DuplexEndpoint."""

    def __init__(self, conn: "Connection", stream_id: int,
                 send_window: int, recv_window: int):
        self._conn = conn
        self.stream_id = stream_id
        self.label = f"{conn.label}/s{stream_id}"

        # Receive side.
        self._recv_next = 0
        self._recv_segments: dict[int, bytes] = {}
        self._ready: deque[bytes] = deque()
        self._ready_bytes = 0
        self._recv_final_size: int | None = None
        self._recv_high = 0
        self._recv_window = recv_window
        self._recv_consumed = 0
        self._advertised_max = recv_window
        self._recv_event = asyncio.Event()

        # Send side.
        self._send_buf = bytearray()
        self._packetize_offset = 0
        self._retransmit: deque[tuple[int, bytes, bool]] = deque()
        self._fin_pending = False
        self._fin_sent = False
        self._send_closed = False
        self._peer_max_offset = send_window
        self._send_event = asyncio.Event()
        self._send_event.set()
        self._unacked_slices = 0

        self._reset_code: int | None = None
        self._reset_sent = False
        self._reset_acked = False
        self._conn_error: ConnectionClosedError | None = None

    # ------------------------------------------------------------------
    # Application-facing API
    # ------------------------------------------------------------------

    async def read(self, max_bytes: int) -> bytes:
        """Read up to ``max_bytes``; b"" signals end-of-stream forever."""
        if max_bytes < 1:
            raise ValueError("max_bytes must be >= 1")
        while True:
            if self._ready:
                chunk = self._ready.popleft()
                if len(chunk) > max_bytes:
                    self._ready.appendleft(chunk[max_bytes:])
                    chunk = chunk[:max_bytes]
                self._ready_bytes -= len(chunk)
                self._on_consumed(len(chunk))
                return chunk
            if self._reset_code is not None:
                raise StreamResetError(self._reset_code)
            if self._recv_final_size is not None and self._recv_next >= self._recv_final_size:
                return b""
            if self._conn_error is not None:
                raise self._conn_error
            self._recv_event.clear()
            await self._recv_event.wait()

    async def write(self, data: bytes) -> None:
        """Queue bytes for transmission; blocks while the buffer is full."""
        self._check_writable()
        if not data:
            return
        self._send_buf += data
        self._conn.wake_sender(self)
        while len(self._send_buf) >= SEND_BUF_HIGH_WATER:
            self._send_event.clear()
            await self._send_event.wait()
            self._check_writable()

    async def write_eof(self) -> None:
        """Half-close the send direction; reads remain available."""
        if self._send_closed:
            return
        self._check_writable()
        self._fin_pending = True
        self._send_closed = True
        self._conn.wake_sender(self)

    def reset(self, error_code: int) -> None:
        """Abruptly terminate both directions with an application code."""
        if self._reset_sent or self._conn.is_closed:
            return
        self._reset_sent = True
        self._teardown_send()
        if self._reset_code is None:
            self._reset_code = error_code
        self._recv_event.set()
        self._conn.send_reset(self.stream_id, error_code)

    def abort(self) -> None:
        self.reset(ABORT_ERROR_CODE)

    @property
    def is_reset(self) -> bool:
        return self._reset_code is not None or self._reset_sent

    @property
    def reset_error_code(self) -> int | None:
        return self._reset_code

    # ------------------------------------------------------------------
    # Connection-facing: receive path
    # ------------------------------------------------------------------

    def on_stream_frame(self, offset: int, data: bytes, fin: bool) -> int:
        """Ingest one slice; returns the advance of this stream's highest
        received offset, for connection-level flow accounting."""
        if self._reset_code is not None:
            return 0
        end = offset + len(data)
        if fin:
            self._recv_final_size = end
        if end > self._advertised_max:
            # Peer overran our advertised window; drop the excess rather
            # than buffer unbounded data.
            data = data[: max(0, self._advertised_max - offset)]
            end = offset + len(data)
        advance = 0
        if end > self._recv_high:
            advance = end - self._recv_high
            self._recv_high = end
        if end > self._recv_next:
            if offset < self._recv_next:
                data = data[self._recv_next - offset:]
                offset = self._recv_next
            if offset == self._recv_next:
                self._deliver(data)
                self._drain_segments()
            else:
                existing = self._recv_segments.get(offset)
                if existing is None or len(existing) < len(data):
                    self._recv_segments[offset] = data
        if self._recv_final_size is not None and self._recv_next >= self._recv_final_size:
            self._recv_event.set()
        return advance

    def _deliver(self, data: bytes) -> None:
        if data:
            self._ready.append(data)
            self._ready_bytes += len(data)
            self._recv_next += len(data)
            self._recv_event.set()

    def _drain_segments(self) -> None:
        while self._recv_segments:
            seg = self._recv_segments.pop(self._recv_next, None)
            if seg is not None:
                self._deliver(seg)
                continue
            # Trim or drop segments the in-order frontier ran past.
            changed = False
            for off in list(self._recv_segments):
                seg = self._recv_segments[off]
                if off + len(seg) <= self._recv_next:
                    del self._recv_segments[off]
                    changed = True
                elif off < self._recv_next:
                    del self._recv_segments[off]
                    self._recv_segments[self._recv_next] = seg[self._recv_next - off:]
                    changed = True
            if not changed:
                break

    def _on_consumed(self, n: int) -> None:
        self._recv_consumed += n
        self._conn.on_app_consumed(n)
        target = self._recv_consumed + self._recv_window
        if target - self._advertised_max >= self._recv_window // 2:
            self._advertised_max = target
            self._conn.send_max_stream_data(self.stream_id, target)

    def on_reset_frame(self, error_code: int) -> None:
        if self._reset_code is None:
            self._reset_code = error_code
        self._ready.clear()
        self._ready_bytes = 0
        self._recv_segments.clear()
        self._teardown_send()
        self._recv_event.set()
        self._send_event.set()

    def on_connection_lost(self, error: ConnectionClosedError) -> None:
        self._conn_error = error
        self._recv_event.set()
        self._send_event.set()

    def on_max_stream_data(self, max_offset: int) -> None:
        if max_offset > self._peer_max_offset:
            self._peer_max_offset = max_offset
            self._conn.wake_sender(self)

    # ------------------------------------------------------------------
    # Connection-facing: send path
    # ------------------------------------------------------------------

    def _check_writable(self) -> None:
        if self._conn_error is not None:
            raise self._conn_error
        if self.is_reset:
            raise StreamResetError(self._reset_code if self._reset_code is not None else 0)
        if self._send_closed:
            raise RuntimeError("write on a half-closed stream")

    def _teardown_send(self) -> None:
        self._send_buf.clear()
        self._retransmit.clear()
        self._fin_pending = False
        self._send_closed = True
        self._send_event.set()

    def has_sendable(self, conn_credit: int) -> bool:
        if self._reset_sent or self._conn_error is not None:
            return False
        if self._retransmit:
            return True
        if self._send_buf and self._packetize_offset < self._peer_max_offset and conn_credit > 0:
            return True
        return self._fin_pending and not self._fin_sent and not self._send_buf

    def next_slice(self, max_len: int, conn_credit: int) -> tuple[int, bytes, bool, bool] | None:
        """Produce (offset, data, fin, consumes_conn_credit) or None.

        Every emitted slice increments the unacked count; the count drops
        when the slice is acknowledged or requeued for retransmission, so
        splits during retransmit stay balanced.  Retransmissions never
        consume new connection credit.
        """
        if self._retransmit:
            offset, data, fin = self._retransmit.popleft()
            if len(data) > max_len:
                self._retransmit.appendleft((offset + max_len, data[max_len:], fin))
                data, fin = data[:max_len], False
            self._unacked_slices += 1
            return offset, data, fin, False

        stream_credit = self._peer_max_offset - self._packetize_offset
        n = min(len(self._send_buf), max_len, stream_credit, conn_credit)
        fin_only = self._fin_pending and not self._fin_sent and not self._send_buf
        if n <= 0 and not fin_only:
            return None
        if n <= 0:
            data = b""
            offset = self._packetize_offset
        else:
            data = bytes(self._send_buf[:n])
            del self._send_buf[:n]
            offset = self._packetize_offset
            self._packetize_offset += n
            if len(self._send_buf) < SEND_BUF_LOW_WATER:
                self._send_event.set()
        fin = self._fin_pending and not self._send_buf and not self._fin_sent
        if fin:
            self._fin_sent = True
        self._unacked_slices += 1
        return offset, data, fin, bool(n > 0)

    def requeue_slice(self, offset: int, data: bytes, fin: bool) -> None:
        self._unacked_slices -= 1
        if self._reset_sent or self._conn_error is not None:
            return
        self._retransmit.append((offset, data, fin))
        self._conn.wake_sender(self)

    def on_slice_acked(self) -> None:
        self._unacked_slices -= 1

    def on_reset_acked(self) -> None:
        self._reset_acked = True

    @property
    def recv_finished(self) -> bool:
        if self._reset_code is not None:
            return True
        return (
            self._recv_final_size is not None
            and self._recv_next >= self._recv_final_size
        )

    @property
    def send_finished(self) -> bool:
        if self._reset_sent:
            return self._reset_acked
        return (
            self._fin_sent
            and not self._send_buf
            and not self._retransmit
            and self._unacked_slices <= 0
        )

    @property
    def finished(self) -> bool:
        return self.recv_finished and self.send_finished
