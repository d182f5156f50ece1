"""Packet and frame codec for the tunnel's UDP transport.

Datagram layout (fixed-width header, 17 bytes):

    type:u8  connection_id:8B  packet_number:u64be  payload...

Packet types: HELLO carries the client's first handshake flight (so a
passive tap can count handshake attempts by distinct connection id),
HANDSHAKE carries the rest of the TLS byte stream in the clear (exactly
what TLS-over-TCP exposes), DATA payloads are sealed end-to-end with
ChaCha20-Poly1305 once session keys exist.  The nonce is the packet
number; the header is authenticated as associated data.

Frames use fixed-width fields throughout; one datagram carries any
number of frames back to back.
"""

from __future__ import annotations

import struct
from typing import NamedTuple, Union

HEADER_LEN = 17
HEADER_STRUCT = struct.Struct("!B8sQ")

PACKET_HELLO = 0x01
PACKET_HANDSHAKE = 0x02
PACKET_DATA = 0x03

FRAME_PING = 0x01
FRAME_ACK = 0x02
FRAME_HS_DATA = 0x03
FRAME_STREAM = 0x04
FRAME_RESET_STREAM = 0x05
FRAME_MAX_STREAM_DATA = 0x06
FRAME_MAX_DATA = 0x07
FRAME_CLOSE = 0x08

AEAD_TAG_LEN = 16

_ACK_HEAD = struct.Struct("!QIB")
_ACK_RANGE = struct.Struct("!II")
_HS_HEAD = struct.Struct("!QH")
_STREAM_HEAD = struct.Struct("!BIQH")
_RESET = struct.Struct("!II")
_MAX_STREAM = struct.Struct("!IQ")
_MAX_DATA = struct.Struct("!Q")
_CLOSE_HEAD = struct.Struct("!IH")

_STREAM_FIN = 0x01


class WireFormatError(ValueError):
    """Malformed packet or frame."""


class PingFrame(NamedTuple):
    pass


class AckFrame(NamedTuple):
    """Acknowledged packet-number ranges, highest first.

    ``ranges`` holds inclusive (low, high) pairs in descending order;
    ``ack_delay_us`` is the receiver-side delay between receiving the
    largest packet and sending this ACK.
    """

    largest: int
    ack_delay_us: int
    ranges: tuple[tuple[int, int], ...]


class HsDataFrame(NamedTuple):
    offset: int
    data: bytes


class StreamFrame(NamedTuple):
    stream_id: int
    offset: int
    fin: bool
    data: bytes


class ResetStreamFrame(NamedTuple):
    stream_id: int
    error_code: int


class MaxStreamDataFrame(NamedTuple):
    stream_id: int
    max_offset: int


class MaxDataFrame(NamedTuple):
    max_bytes: int


class CloseFrame(NamedTuple):
    error_code: int
    reason: str


Frame = Union[
    PingFrame,
    AckFrame,
    HsDataFrame,
    StreamFrame,
    ResetStreamFrame,
    MaxStreamDataFrame,
    MaxDataFrame,
    CloseFrame,
]

PING = PingFrame()


def encode_header(packet_type: int, connection_id: bytes, packet_number: int) -> bytes:
    return HEADER_STRUCT.pack(packet_type, connection_id, packet_number)


def decode_header(datagram: bytes) -> tuple[int, bytes, int]:
    if len(datagram) < HEADER_LEN:
        raise WireFormatError(f"datagram too short for header: {len(datagram)} bytes")
    packet_type, cid, pn = HEADER_STRUCT.unpack_from(datagram)
    if packet_type not in (PACKET_HELLO, PACKET_HANDSHAKE, PACKET_DATA):
        raise WireFormatError(f"unknown packet type 0x{packet_type:02x}")
    return packet_type, cid, pn


def append_ping(buf: bytearray) -> None:
    buf.append(FRAME_PING)


def append_ack(buf: bytearray, largest: int, ack_delay_us: int, ranges) -> None:
    """ranges: iterable of inclusive (low, high) pairs, descending, the
    first one ending at ``largest``."""
    ranges = list(ranges)
    buf.append(FRAME_ACK)
    first_lo, first_hi = ranges[0]
    buf += _ACK_HEAD.pack(largest, ack_delay_us, len(ranges) - 1)
    buf += struct.pack("!I", first_hi - first_lo + 1)
    prev_lo = first_lo
    for lo, hi in ranges[1:]:
        gap = prev_lo - hi - 1
        buf += _ACK_RANGE.pack(gap, hi - lo + 1)
        prev_lo = lo


def append_hs_data(buf: bytearray, offset: int, data: bytes) -> None:
    buf.append(FRAME_HS_DATA)
    buf += _HS_HEAD.pack(offset, len(data))
    buf += data


def append_stream(buf: bytearray, stream_id: int, offset: int, fin: bool, data: bytes) -> None:
    buf.append(FRAME_STREAM)
    buf += _STREAM_HEAD.pack(_STREAM_FIN if fin else 0, stream_id, offset, len(data))
    buf += data


def append_reset_stream(buf: bytearray, stream_id: int, error_code: int) -> None:
    buf.append(FRAME_RESET_STREAM)
    buf += _RESET.pack(stream_id, error_code)


def append_max_stream_data(buf: bytearray, stream_id: int, max_offset: int) -> None:
    buf.append(FRAME_MAX_STREAM_DATA)
    buf += _MAX_STREAM.pack(stream_id, max_offset)


def append_max_data(buf: bytearray, max_bytes: int) -> None:
    buf.append(FRAME_MAX_DATA)
    buf += _MAX_DATA.pack(max_bytes)


def append_close(buf: bytearray, error_code: int, reason: str) -> None:
    encoded = reason.encode("utf-8")[:512]
    buf.append(FRAME_CLOSE)
    buf += _CLOSE_HEAD.pack(error_code, len(encoded))
    buf += encoded


STREAM_FRAME_OVERHEAD = 1 + _STREAM_HEAD.size
HS_FRAME_OVERHEAD = 1 + _HS_HEAD.size
# Worst-case ACK frame: head + first length + 31 extra ranges.
MAX_ACK_RANGES = 32
ACK_FRAME_MAX_LEN = 1 + _ACK_HEAD.size + 4 + (MAX_ACK_RANGES - 1) * _ACK_RANGE.size


def decode_frames(payload: bytes) -> list[Frame]:
    """Decode all frames in a packet payload."""
    frames: list[Frame] = []
    view = payload
    pos = 0
    end = len(payload)
    try:
        while pos < end:
            ftype = view[pos]
            pos += 1
            if ftype == FRAME_STREAM:
                flags, stream_id, offset, length = _STREAM_HEAD.unpack_from(view, pos)
                pos += _STREAM_HEAD.size
                data = bytes(view[pos : pos + length])
                if len(data) != length:
                    raise WireFormatError("stream frame truncated")
                pos += length
                frames.append(StreamFrame(stream_id, offset, bool(flags & _STREAM_FIN), data))
            elif ftype == FRAME_ACK:
                largest, ack_delay_us, extra = _ACK_HEAD.unpack_from(view, pos)
                pos += _ACK_HEAD.size
                (first_len,) = struct.unpack_from("!I", view, pos)
                pos += 4
                if first_len < 1 or first_len > largest + 1:
                    raise WireFormatError("bad ack first range")
                hi = largest
                lo = largest - first_len + 1
                ranges = [(lo, hi)]
                for _ in range(extra):
                    gap, length = _ACK_RANGE.unpack_from(view, pos)
                    pos += _ACK_RANGE.size
                    hi = lo - gap - 1
                    lo = hi - length + 1
                    if length < 1 or lo < 0:
                        raise WireFormatError("bad ack range")
                    ranges.append((lo, hi))
                frames.append(AckFrame(largest, ack_delay_us, tuple(ranges)))
            elif ftype == FRAME_HS_DATA:
                offset, length = _HS_HEAD.unpack_from(view, pos)
                pos += _HS_HEAD.size
                data = bytes(view[pos : pos + length])
                if len(data) != length:
                    raise WireFormatError("handshake frame truncated")
                pos += length
                frames.append(HsDataFrame(offset, data))
            elif ftype == FRAME_PING:
                frames.append(PING)
            elif ftype == FRAME_RESET_STREAM:
                stream_id, error_code = _RESET.unpack_from(view, pos)
                pos += _RESET.size
                frames.append(ResetStreamFrame(stream_id, error_code))
            elif ftype == FRAME_MAX_STREAM_DATA:
                stream_id, max_offset = _MAX_STREAM.unpack_from(view, pos)
                pos += _MAX_STREAM.size
                frames.append(MaxStreamDataFrame(stream_id, max_offset))
            elif ftype == FRAME_MAX_DATA:
                (max_bytes,) = _MAX_DATA.unpack_from(view, pos)
                pos += _MAX_DATA.size
                frames.append(MaxDataFrame(max_bytes))
            elif ftype == FRAME_CLOSE:
                error_code, rlen = _CLOSE_HEAD.unpack_from(view, pos)
                pos += _CLOSE_HEAD.size
                reason = view[pos : pos + rlen].decode("utf-8", "replace")
                pos += rlen
                frames.append(CloseFrame(error_code, reason))
            else:
                raise WireFormatError(f"unknown frame type 0x{ftype:02x}")
    except struct.error as exc:
        raise WireFormatError(f"truncated frame: {exc}") from exc
    return frames
