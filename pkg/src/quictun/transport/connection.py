"""Connection state machine for the secure datagram transport.

Handshake: the TLS 1.3 byte stream (stdlib ``ssl`` over memory BIOs)
rides in HS_DATA frames carried by plaintext HELLO/HANDSHAKE packets,
retransmitted through the same recovery machinery as stream data.  Once
TLS completes, the server sends a key/settings announcement through the
(now encrypted) TLS channel: two fresh ChaCha20-Poly1305 session keys,
one per direction, plus its stream cap and timer settings.  The client
confirms, and from then on every packet is a sealed DATA packet whose
nonce is the packet number and whose header is authenticated data.
Forward secrecy and server authentication are inherited from the TLS
exchange that transported the keys.

A single packet-number space covers handshake and data packets, so one
ACK/loss-detection/congestion instance drives the whole connection.
"""

from __future__ import annotations

import asyncio
import logging
import os
import ssl
import struct
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from ..errors import ConnectionClosedError, HandshakeError, StreamLimitError
from . import wire
from .recovery import LossRecovery, SentPacket
from .streams import Stream, is_client_initiated

log = logging.getLogger("quictun.transport")

# Transport-level close codes (distinct from application stream resets).
CLOSE_NONE = 0x00
CLOSE_IDLE_TIMEOUT = 0x01
CLOSE_TLS_ERROR = 0x02
CLOSE_PROTOCOL_ERROR = 0x03
CLOSE_SHUTDOWN = 0x04

# Stream reset code used when the peer exceeds our stream cap.
STREAM_LIMIT_RESET = 0x04

ACK_ELICITING_THRESHOLD = 2
ACK_DELAY = 0.025
MAX_PACKETS_PER_FLUSH = 64
CLOSE_REPEAT = 3

_KEYS_MAGIC = b"QTK1"
_CONF_MAGIC = b"QTC1"
_KEYS_STRUCT = struct.Struct("!4s32s32sIIIQQ")
_KEYS_LEN = _KEYS_STRUCT.size


@dataclass
class TransportSettings:
    """Tunable knobs for one endpoint; mirrored to the peer at handshake."""

    max_datagram_size: int = 1350
    keepalive_interval: float = 2.0
    idle_timeout: float = 30.0
    max_streams: int = 100
    allow_unidirectional: bool = False  # reserved; streams are always bidirectional
    stream_window: int = 2 * 1024 * 1024
    conn_window: int = 16 * 1024 * 1024
    handshake_timeout: float = 10.0

    def __post_init__(self):
        if self.max_streams < 1:
            raise ValueError("max_streams must be >= 1")
        if self.keepalive_interval <= 0:
            raise ValueError("keep_alive_interval must be > 0")
        if self.max_datagram_size < 256:
            raise ValueError("max_datagram_size must be >= 256")


@dataclass
class ConnectionStats:
    packets_sent: int = 0
    packets_received: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    decrypt_failures: int = 0
    slices_retransmitted: int = 0


class Connection:
    """One secure transport connection bound to a single event loop."""

    def __init__(
        self,
        *,
        is_client: bool,
        ssl_context: ssl.SSLContext,
        peer_addr: tuple[str, int],
        send_fn: Callable[[bytes, tuple[str, int]], None],
        settings: TransportSettings,
        connection_id: bytes | None = None,
        server_hostname: str | None = None,
        on_established: Optional[Callable[["Connection"], None]] = None,
        on_closed: Optional[Callable[["Connection"], None]] = None,
    ):
        self.is_client = is_client
        self.peer_addr = peer_addr
        self.settings = settings
        self.cid = connection_id if connection_id is not None else os.urandom(8)
        self.label = f"{'cli' if is_client else 'srv'}-{self.cid.hex()[:8]}"
        self.stats = ConnectionStats()

        self._loop = asyncio.get_event_loop()
        self._send_fn = send_fn
        self._on_established_cb = on_established
        self._on_closed_cb = on_closed

        self._tls_in = ssl.MemoryBIO()
        self._tls_out = ssl.MemoryBIO()
        self._tls = ssl_context.wrap_bio(
            self._tls_in,
            self._tls_out,
            server_side=not is_client,
            server_hostname=server_hostname if is_client else None,
        )
        self._tls_handshake_done = False
        self._tls_app_buf = bytearray()

        # Handshake byte stream (each direction), offset-addressed.
        self._hs_send_buf = bytearray()
        self._hs_packetize_offset = 0
        self._hs_retransmit: deque[tuple[int, bytes]] = deque()
        self._hs_recv_next = 0
        self._hs_segments: dict[int, bytes] = {}

        self._send_aead: ChaCha20Poly1305 | None = None
        self._recv_aead: ChaCha20Poly1305 | None = None

        self.established = False
        self._established_waiter: asyncio.Future = self._loop.create_future()
        # Retrieve the exception eagerly so server-side connections whose
        # handshake fails (nobody awaits them) do not log warnings.
        self._established_waiter.add_done_callback(
            lambda f: f.exception() if not f.cancelled() else None
        )
        self._handshake_deadline = time.monotonic() + settings.handshake_timeout

        # Peer-dependent session parameters (overwritten by KEYS message).
        self.peer_max_streams = settings.max_streams

        self._recovery = LossRecovery(settings.max_datagram_size - wire.HEADER_LEN)
        self._next_pn = 0

        # ACK bookkeeping for packets we receive.
        self._recv_ranges: list[list[int]] = []  # ascending [lo, hi]
        self._ack_eliciting_pending = 0
        self._ack_due_at: float | None = None
        self._largest_recv_pn = -1
        self._largest_recv_time = 0.0

        self._streams: dict[int, Stream] = {}
        self._retired_streams: set[int] = set()
        self._next_stream_id = 0 if is_client else 1
        self._accept_queue: deque[Stream] = deque()
        self._accept_event = asyncio.Event()

        # Connection-level flow control.
        self._conn_consumed = 0
        self._conn_recv_high = 0
        self._max_data_advertised = settings.conn_window
        self._peer_max_data = settings.conn_window
        self._conn_sent_high = 0

        # Control frames pending transmission (latest value wins per key).
        self._pending_resets: dict[int, int] = {}
        self._pending_max_stream: dict[int, int] = {}
        self._pending_max_data: int | None = None
        self._ping_pending = False

        self._sendable_streams: dict[int, Stream] = {}

        self._last_recv_time = time.monotonic()
        self._last_eliciting_sent = time.monotonic()

        self.is_closed = False
        self._close_error: ConnectionClosedError | None = None
        self._close_packet: bytes | None = None
        self._close_replies_left = 10
        self._closed_waiter: asyncio.Future = self._loop.create_future()

        self._flush_scheduled = False
        self._timer_handle: asyncio.TimerHandle | None = None

    # ------------------------------------------------------------------
    # Public API
    # ------------------------------------------------------------------

    def start(self) -> None:
        """Kick off the handshake (client) or await one (server)."""
        if self.is_client:
            self._advance_handshake()
            self._flush()
        self._arm_timer()

    async def wait_established(self) -> None:
        await asyncio.shield(self._established_waiter)

    async def open_stream(self) -> Stream:
        if not self.established:
            await self.wait_established()
        if self.is_closed:
            raise self._close_error or ConnectionClosedError()
        active_local = sum(
            1 for sid in self._streams if is_client_initiated(sid) == self.is_client
        )
        if active_local >= self.peer_max_streams:
            raise StreamLimitError(
                f"peer allows at most {self.peer_max_streams} concurrent streams"
            )
        sid = self._next_stream_id
        self._next_stream_id += 4
        stream = Stream(self, sid, self.settings.stream_window, self.settings.stream_window)
        self._streams[sid] = stream
        return stream

    async def accept_stream(self) -> Stream:
        while True:
            if self._accept_queue:
                return self._accept_queue.popleft()
            if self.is_closed:
                raise self._close_error or ConnectionClosedError()
            self._accept_event.clear()
            await self._accept_event.wait()

    @property
    def active_stream_count(self) -> int:
        return len(self._streams)

    def close(self, error_code: int = CLOSE_NONE, reason: str = "") -> None:
        if self.is_closed:
            return
        buf = bytearray()
        wire.append_close(buf, error_code, reason)
        packet = self._seal_packet(bytes(buf), force_handshake=not self.established)
        for _ in range(CLOSE_REPEAT):
            self._transmit_raw(packet)
        self._close_packet = packet
        self._teardown(ConnectionClosedError(f"locally closed: {reason or error_code}", error_code))

    async def wait_closed(self) -> None:
        await asyncio.shield(self._closed_waiter)

    # ------------------------------------------------------------------
    # Stream plumbing callbacks
    # ------------------------------------------------------------------

    def wake_sender(self, stream: Stream | None = None) -> None:
        if stream is not None:
            self._sendable_streams[stream.stream_id] = stream
        if not self._flush_scheduled and not self.is_closed:
            self._flush_scheduled = True
            self._loop.call_soon(self._scheduled_flush)

    def send_reset(self, stream_id: int, error_code: int) -> None:
        self._pending_resets[stream_id] = error_code
        self.wake_sender()

    def send_max_stream_data(self, stream_id: int, max_offset: int) -> None:
        self._pending_max_stream[stream_id] = max_offset
        self.wake_sender()

    def on_app_consumed(self, n: int) -> None:
        self._conn_consumed += n
        target = self._conn_consumed + self.settings.conn_window
        if target - self._max_data_advertised >= self.settings.conn_window // 2:
            self._max_data_advertised = target
            self._pending_max_data = target
            self.wake_sender()

    # ------------------------------------------------------------------
    # Receive path
    # ------------------------------------------------------------------

    def datagram_received(self, datagram: bytes) -> None:
        if self.is_closed:
            # Echo the close a bounded number of times so a peer that
            # missed it finds out quickly.
            if self._close_packet is not None and self._close_replies_left > 0:
                self._close_replies_left -= 1
                self._transmit_raw(self._close_packet)
            return
        try:
            packet_type, _cid, pn = wire.decode_header(datagram)
        except wire.WireFormatError:
            return
        now = time.monotonic()

        if packet_type == wire.PACKET_DATA:
            if self._recv_aead is None:
                return
            header = datagram[: wire.HEADER_LEN]
            try:
                payload = self._recv_aead.decrypt(
                    pn.to_bytes(12, "big"), bytes(datagram[wire.HEADER_LEN :]), header
                )
            except Exception:
                self.stats.decrypt_failures += 1
                return
            if not self.established:
                # A decryptable DATA packet proves the client holds the
                # session keys: implicit handshake confirmation.
                self._set_established()
        else:
            payload = bytes(datagram[wire.HEADER_LEN :])

        try:
            frames = wire.decode_frames(payload)
        except wire.WireFormatError as exc:
            log.debug("%s: dropping malformed packet %d: %s", self.label, pn, exc)
            return

        self.stats.packets_received += 1
        self.stats.bytes_received += len(datagram)
        self._last_recv_time = now

        plaintext_ok = packet_type != wire.PACKET_DATA
        eliciting = False
        for frame in frames:
            if isinstance(frame, wire.StreamFrame):
                if plaintext_ok:
                    continue  # stream data never travels unencrypted
                eliciting = True
                self._on_stream_frame(frame)
            elif isinstance(frame, wire.AckFrame):
                self._on_ack_frame(frame)
            elif isinstance(frame, wire.HsDataFrame):
                eliciting = True
                self._on_hs_data(frame)
            elif isinstance(frame, wire.PingFrame):
                eliciting = True
            elif isinstance(frame, wire.ResetStreamFrame):
                if plaintext_ok:
                    continue
                eliciting = True
                self._on_reset_frame(frame)
            elif isinstance(frame, wire.MaxStreamDataFrame):
                eliciting = True
                stream = self._streams.get(frame.stream_id)
                if stream is not None:
                    stream.on_max_stream_data(frame.max_offset)
            elif isinstance(frame, wire.MaxDataFrame):
                eliciting = True
                if frame.max_bytes > self._peer_max_data:
                    self._peer_max_data = frame.max_bytes
                    self.wake_sender()
            elif isinstance(frame, wire.CloseFrame):
                self._on_close_frame(frame)
                return

        self._record_received_pn(pn, now, eliciting)
        if self._ack_eliciting_pending >= ACK_ELICITING_THRESHOLD:
            self._flush()
        else:
            self._arm_timer()

    def _record_received_pn(self, pn: int, now: float, eliciting: bool) -> None:
        if pn > self._largest_recv_pn:
            self._largest_recv_pn = pn
            self._largest_recv_time = now
        ranges = self._recv_ranges
        inserted = False
        for entry in reversed(ranges):
            lo, hi = entry
            if lo - 1 <= pn <= hi + 1:
                entry[0] = min(lo, pn)
                entry[1] = max(hi, pn)
                inserted = True
                break
            if pn > hi + 1:
                break
        if not inserted:
            ranges.append([pn, pn])
            ranges.sort()
        # Merge neighbours that an insertion may have bridged.
        merged: list[list[int]] = []
        for entry in ranges:
            if merged and entry[0] <= merged[-1][1] + 1:
                merged[-1][1] = max(merged[-1][1], entry[1])
            else:
                merged.append(entry)
        if len(merged) > 64:
            merged = merged[-64:]
        self._recv_ranges = merged

        if eliciting:
            self._ack_eliciting_pending += 1
            if self._ack_due_at is None:
                self._ack_due_at = now + ACK_DELAY

    # -- frame handlers -----------------------------------------------------

    def _on_stream_frame(self, frame: wire.StreamFrame) -> None:
        stream = self._get_or_accept_stream(frame.stream_id)
        if stream is None:
            return
        advance = stream.on_stream_frame(frame.offset, frame.data, frame.fin)
        if advance:
            self._conn_recv_high += advance
        self._maybe_retire(stream)

    def _on_reset_frame(self, frame: wire.ResetStreamFrame) -> None:
        stream = self._get_or_accept_stream(frame.stream_id)
        if stream is None:
            return
        stream.on_reset_frame(frame.error_code)
        self._maybe_retire(stream)

    def _get_or_accept_stream(self, stream_id: int) -> Stream | None:
        stream = self._streams.get(stream_id)
        if stream is not None:
            return stream
        if stream_id in self._retired_streams:
            return None
        if is_client_initiated(stream_id) == self.is_client:
            return None  # stale frame for one of our own closed streams
        peer_active = sum(
            1 for sid in self._streams if is_client_initiated(sid) != self.is_client
        )
        if peer_active >= self.settings.max_streams:
            self.send_reset(stream_id, STREAM_LIMIT_RESET)
            return None
        stream = Stream(self, stream_id, self.settings.stream_window, self.settings.stream_window)
        self._streams[stream_id] = stream
        self._accept_queue.append(stream)
        self._accept_event.set()
        return stream

    def _maybe_retire(self, stream: Stream) -> None:
        if stream.finished:
            self._streams.pop(stream.stream_id, None)
            self._sendable_streams.pop(stream.stream_id, None)
            self._retired_streams.add(stream.stream_id)

    def _on_ack_frame(self, frame: wire.AckFrame) -> None:
        newly_acked, newly_lost = self._recovery.on_ack_received(
            frame.largest, frame.ack_delay_us, frame.ranges
        )
        for pkt in newly_acked:
            self._on_packet_acked(pkt)
        for pkt in newly_lost:
            self._requeue_frames(pkt)
        if newly_acked or newly_lost:
            self.wake_sender()
            self._arm_timer()

    def _on_packet_acked(self, pkt: SentPacket) -> None:
        for desc in pkt.frames:
            kind = desc[0]
            if kind == "stream":
                stream = self._streams.get(desc[1])
                if stream is not None:
                    stream.on_slice_acked()
                    self._maybe_retire(stream)
            elif kind == "reset":
                stream = self._streams.get(desc[1])
                if stream is not None:
                    stream.on_reset_acked()
                    self._maybe_retire(stream)

    def _requeue_frames(self, pkt: SentPacket) -> None:
        for desc in pkt.frames:
            kind = desc[0]
            if kind == "stream":
                _, sid, offset, data, fin = desc
                stream = self._streams.get(sid)
                if stream is not None:
                    stream.requeue_slice(offset, data, fin)
                    self._sendable_streams[sid] = stream
                    self.stats.slices_retransmitted += 1
            elif kind == "hs":
                _, offset, data = desc
                self._hs_retransmit.append((offset, data))
                self.stats.slices_retransmitted += 1
            elif kind == "reset":
                _, sid, code = desc
                if sid in self._streams:
                    self._pending_resets[sid] = code
            elif kind == "max_stream":
                sid = desc[1]
                stream = self._streams.get(sid)
                if stream is not None:
                    self._pending_max_stream[sid] = stream._advertised_max
            elif kind == "max_data":
                self._pending_max_data = self._max_data_advertised
        self.wake_sender()

    def _on_close_frame(self, frame: wire.CloseFrame) -> None:
        self._teardown(
            ConnectionClosedError(
                f"closed by peer: {frame.reason or frame.error_code}", frame.error_code
            )
        )

    # ------------------------------------------------------------------
    # Handshake
    # ------------------------------------------------------------------

    def _on_hs_data(self, frame: wire.HsDataFrame) -> None:
        offset, data = frame.offset, frame.data
        end = offset + len(data)
        if end <= self._hs_recv_next:
            return
        if offset > self._hs_recv_next:
            self._hs_segments[offset] = data
            return
        if offset < self._hs_recv_next:
            data = data[self._hs_recv_next - offset:]
        self._tls_in.write(data)
        self._hs_recv_next += len(data)
        while True:
            seg = self._hs_segments.pop(self._hs_recv_next, None)
            if seg is None:
                stale = [o for o in self._hs_segments if o + len(self._hs_segments[o]) <= self._hs_recv_next]
                for o in stale:
                    del self._hs_segments[o]
                mid = [o for o in self._hs_segments if o < self._hs_recv_next]
                if not mid:
                    break
                o = mid[0]
                seg = self._hs_segments.pop(o)[self._hs_recv_next - o:]
            self._tls_in.write(seg)
            self._hs_recv_next += len(seg)
        self._advance_handshake()

    def _advance_handshake(self) -> None:
        if self.is_closed:
            return
        try:
            if not self._tls_handshake_done:
                try:
                    self._tls.do_handshake()
                    self._tls_handshake_done = True
                except ssl.SSLWantReadError:
                    pass
            if self._tls_handshake_done:
                self._pump_tls_reads()
                if not self.is_client and self._send_aead is None:
                    self._server_send_keys()
                if self.is_client and self._send_aead is None:
                    self._client_try_keys()
                elif not self.is_client and not self.established:
                    if bytes(self._tls_app_buf[: len(_CONF_MAGIC)]) == _CONF_MAGIC:
                        del self._tls_app_buf[: len(_CONF_MAGIC)]
                        self._set_established()
        except ssl.SSLError as exc:
            self._fail_handshake(exc)
            return
        self._queue_tls_output()
        self.wake_sender()

    def _pump_tls_reads(self) -> None:
        while True:
            try:
                chunk = self._tls.read(4096)
            except ssl.SSLWantReadError:
                break
            except ssl.SSLZeroReturnError:
                break
            if not chunk:
                break
            self._tls_app_buf += chunk

    def _server_send_keys(self) -> None:
        if self._tls.selected_alpn_protocol() is None:
            raise ssl.SSLError("peer did not negotiate the expected ALPN protocol")
        client_key = os.urandom(32)
        server_key = os.urandom(32)
        msg = _KEYS_STRUCT.pack(
            _KEYS_MAGIC,
            client_key,
            server_key,
            self.settings.max_streams,
            int(self.settings.keepalive_interval * 1000),
            int(self.settings.idle_timeout * 1000),
            self.settings.stream_window,
            self.settings.conn_window,
        )
        self._tls.write(msg)
        self._send_aead = ChaCha20Poly1305(server_key)
        self._recv_aead = ChaCha20Poly1305(client_key)

    def _client_try_keys(self) -> None:
        if len(self._tls_app_buf) < _KEYS_LEN:
            return
        (magic, client_key, server_key, max_streams, keepalive_ms, idle_ms,
         stream_window, conn_window) = _KEYS_STRUCT.unpack(bytes(self._tls_app_buf[:_KEYS_LEN]))
        del self._tls_app_buf[:_KEYS_LEN]
        if magic != _KEYS_MAGIC:
            raise ssl.SSLError("malformed key announcement from server")
        self._send_aead = ChaCha20Poly1305(client_key)
        self._recv_aead = ChaCha20Poly1305(server_key)
        self.peer_max_streams = max_streams
        # Honour the server's idle expectations if they are stricter, and
        # adopt its flow-control windows so both directions agree on the
        # initial credits (no data has been exchanged yet).
        self.settings.idle_timeout = min(self.settings.idle_timeout, idle_ms / 1000.0)
        self.settings.stream_window = stream_window
        self.settings.conn_window = conn_window
        self._peer_max_data = conn_window
        self._max_data_advertised = conn_window
        self._tls.write(_CONF_MAGIC)
        self._set_established()

    def _queue_tls_output(self) -> None:
        pending = self._tls_out.read()
        if pending:
            self._hs_send_buf += pending

    def _set_established(self) -> None:
        if self.established:
            return
        self.established = True
        if not self._established_waiter.done():
            self._established_waiter.set_result(None)
        if self._on_established_cb is not None:
            self._on_established_cb(self)
        log.debug("%s: established with %s", self.label, self.peer_addr)
        self.wake_sender()
        self._arm_timer()

    def _fail_handshake(self, exc: BaseException) -> None:
        log.debug("%s: handshake failed: %r", self.label, exc)
        buf = bytearray()
        wire.append_close(buf, CLOSE_TLS_ERROR, str(exc)[:200])
        packet = self._seal_packet(bytes(buf), force_handshake=True)
        for _ in range(CLOSE_REPEAT):
            self._transmit_raw(packet)
        error = HandshakeError(f"handshake failed: {exc}")
        error.__cause__ = exc if isinstance(exc, Exception) else None
        self._teardown(ConnectionClosedError(str(error), CLOSE_TLS_ERROR), handshake_error=error)

    # ------------------------------------------------------------------
    # Send path
    # ------------------------------------------------------------------

    def _scheduled_flush(self) -> None:
        self._flush_scheduled = False
        self._flush()

    def _flush(self) -> None:
        if self.is_closed:
            return
        sent = 0
        while sent < MAX_PACKETS_PER_FLUSH:
            if not self._build_and_send_packet():
                break
            sent += 1
        if sent == MAX_PACKETS_PER_FLUSH:
            self.wake_sender()  # yield to the loop, continue shortly
        self._arm_timer()

    def _ack_frame_due(self, now: float) -> bool:
        if self._ack_eliciting_pending >= ACK_ELICITING_THRESHOLD:
            return True
        return self._ack_due_at is not None and now >= self._ack_due_at

    def _append_ack(self, buf: bytearray, now: float) -> None:
        ranges_desc = [(lo, hi) for lo, hi in reversed(self._recv_ranges)][: wire.MAX_ACK_RANGES]
        if not ranges_desc:
            return
        delay_us = max(0, int((now - self._largest_recv_time) * 1e6))
        wire.append_ack(buf, self._largest_recv_pn, delay_us, ranges_desc)
        self._ack_eliciting_pending = 0
        self._ack_due_at = None

    def _build_and_send_packet(self) -> bool:
        now = time.monotonic()
        tag_len = wire.AEAD_TAG_LEN if self.established else 0
        capacity = self.settings.max_datagram_size - wire.HEADER_LEN - tag_len
        buf = bytearray()
        frames_meta: list[tuple] = []
        eliciting = False
        congestion_free = True

        if self._ack_frame_due(now):
            self._append_ack(buf, now)

        # Control frames: cheap, never congestion-blocked.
        if self._ping_pending and len(buf) + 1 <= capacity:
            wire.append_ping(buf)
            frames_meta.append(("ping",))
            self._ping_pending = False
            eliciting = True
        for sid in list(self._pending_resets):
            if len(buf) + 9 > capacity:
                break
            code = self._pending_resets.pop(sid)
            wire.append_reset_stream(buf, sid, code)
            frames_meta.append(("reset", sid, code))
            eliciting = True
        for sid in list(self._pending_max_stream):
            if len(buf) + 13 > capacity:
                break
            value = self._pending_max_stream.pop(sid)
            wire.append_max_stream_data(buf, sid, value)
            frames_meta.append(("max_stream", sid))
            eliciting = True
        if self._pending_max_data is not None and len(buf) + 9 <= capacity:
            wire.append_max_data(buf, self._pending_max_data)
            frames_meta.append(("max_data",))
            self._pending_max_data = None
            eliciting = True

        # Handshake bytes (and their retransmissions).
        hello = False
        while len(buf) + wire.HS_FRAME_OVERHEAD + 1 <= capacity and (
            self._hs_retransmit or self._hs_send_buf
        ):
            space = capacity - len(buf) - wire.HS_FRAME_OVERHEAD
            if self._hs_retransmit:
                offset, data = self._hs_retransmit.popleft()
                if len(data) > space:
                    self._hs_retransmit.appendleft((offset + space, data[space:]))
                    data = data[:space]
            else:
                n = min(space, len(self._hs_send_buf))
                data = bytes(self._hs_send_buf[:n])
                del self._hs_send_buf[:n]
                offset = self._hs_packetize_offset
                self._hs_packetize_offset += n
            if not data:
                break
            if self.is_client and offset == 0:
                hello = True
            wire.append_hs_data(buf, offset, data)
            frames_meta.append(("hs", offset, data))
            eliciting = True

        # Stream data, round-robin over streams that signalled demand.
        if self.established and self._sendable_streams:
            can_send_data = self._recovery.can_send(self.settings.max_datagram_size)
            if can_send_data:
                conn_credit = self._peer_max_data - self._conn_sent_high
                for sid in list(self._sendable_streams):
                    space = capacity - len(buf) - wire.STREAM_FRAME_OVERHEAD
                    if space <= 0:
                        break
                    stream = self._sendable_streams[sid]
                    if not stream.has_sendable(conn_credit):
                        del self._sendable_streams[sid]
                        continue
                    produced = stream.next_slice(space, conn_credit)
                    if produced is None:
                        del self._sendable_streams[sid]
                        continue
                    offset, data, fin, counts = produced
                    if counts:
                        self._conn_sent_high += len(data)
                        conn_credit -= len(data)
                    wire.append_stream(buf, sid, offset, fin, data)
                    frames_meta.append(("stream", sid, offset, data, fin))
                    eliciting = True
            else:
                congestion_free = False

        if not buf:
            return False

        packet = self._seal_packet(
            bytes(buf), force_handshake=not self.established, hello=hello
        )
        pn = self._next_pn - 1  # assigned inside _seal_packet
        self._transmit_raw(packet)
        self._recovery.on_packet_sent(
            SentPacket(pn, now, len(packet), eliciting, frames_meta)
        )
        if eliciting:
            self._last_eliciting_sent = now

        # Keep flushing while there is stream demand and congestion room.
        return bool(
            self._hs_send_buf
            or self._hs_retransmit
            or self._pending_resets
            or self._pending_max_stream
            or (self._sendable_streams and congestion_free and self.established)
        )

    def _seal_packet(self, payload: bytes, force_handshake: bool = False, hello: bool = False) -> bytes:
        pn = self._next_pn
        self._next_pn += 1
        if force_handshake or self._send_aead is None:
            ptype = wire.PACKET_HELLO if hello else wire.PACKET_HANDSHAKE
            return wire.encode_header(ptype, self.cid, pn) + payload
        header = wire.encode_header(wire.PACKET_DATA, self.cid, pn)
        sealed = self._send_aead.encrypt(pn.to_bytes(12, "big"), payload, header)
        return header + sealed

    def _transmit_raw(self, packet: bytes) -> None:
        self.stats.packets_sent += 1
        self.stats.bytes_sent += len(packet)
        try:
            self._send_fn(packet, self.peer_addr)
        except OSError as exc:
            log.debug("%s: send failed: %s", self.label, exc)

    # ------------------------------------------------------------------
    # Timers
    # ------------------------------------------------------------------

    def _arm_timer(self) -> None:
        if self.is_closed:
            return
        deadlines = [self._last_recv_time + self.settings.idle_timeout]
        if not self.established:
            deadlines.append(self._handshake_deadline)
        else:
            deadlines.append(self._last_eliciting_sent + self.settings.keepalive_interval)
        if self._ack_due_at is not None:
            deadlines.append(self._ack_due_at)
        loss_at = self._recovery.next_timeout()
        if loss_at is not None:
            deadlines.append(loss_at)
        when = min(deadlines)
        if self._timer_handle is not None:
            self._timer_handle.cancel()
        delay = max(0.0, when - time.monotonic())
        self._timer_handle = self._loop.call_later(delay, self._on_timer)

    def _on_timer(self) -> None:
        self._timer_handle = None
        if self.is_closed:
            return
        now = time.monotonic()

        if now - self._last_recv_time >= self.settings.idle_timeout:
            log.debug("%s: idle timeout", self.label)
            self.close(CLOSE_IDLE_TIMEOUT, "idle timeout")
            return
        if not self.established and now >= self._handshake_deadline:
            self._fail_handshake(TimeoutError("handshake timed out"))
            return

        loss_at = self._recovery.next_timeout()
        if loss_at is not None and now >= loss_at:
            for pkt in self._recovery.on_timeout(now):
                self._requeue_frames(pkt)

        if (
            self.established
            and now - self._last_eliciting_sent >= self.settings.keepalive_interval
        ):
            self._ping_pending = True

        self._flush()

    # ------------------------------------------------------------------
    # Teardown
    # ------------------------------------------------------------------

    def _teardown(self, error: ConnectionClosedError, handshake_error: HandshakeError | None = None) -> None:
        if self.is_closed:
            return
        self.is_closed = True
        self._close_error = error
        if self._timer_handle is not None:
            self._timer_handle.cancel()
            self._timer_handle = None
        for stream in self._streams.values():
            stream.on_connection_lost(error)
        self._streams.clear()
        self._sendable_streams.clear()
        if not self._established_waiter.done():
            self._established_waiter.set_exception(
                handshake_error or HandshakeError(str(error))
            )
        self._accept_event.set()
        if not self._closed_waiter.done():
            self._closed_waiter.set_result(None)
        if self._on_closed_cb is not None:
            self._on_closed_cb(self)
