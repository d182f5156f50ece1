"""Full-duplex byte relay between two duplex endpoints.

This is the heart of every tunnel session: two pumps run concurrently,
one per direction, each copying bytes until its source reaches
end-of-stream, then half-closing its sink.  The relay returns only after
both pumps have stopped and both sinks are flushed, so the surviving
direction is never truncated when the other half-closes first.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, runtime_checkable

from .errors import RelayError

log = logging.getLogger("quictun.relay")

DEFAULT_BUFFER_SIZE = 16 * 1024
# Grace period granted to the surviving direction after the other one
# errors, before it is cancelled outright.
DEFAULT_DRAIN_GRACE = 1.0


@runtime_checkable
class DuplexEndpoint(Protocol):
    """An ordered byte source/sink pair with half-close semantics.

    ``read`` returns b"" once end-of-stream is reached and keeps doing so
    on every later call.  ``write`` applies backpressure (it completes
    only once the sink has accepted the bytes).  ``write_eof`` half-closes
    the write side while reads stay usable.  ``abort`` tears the endpoint
    down immediately, discarding queued data.
    """

    label: str

    async def read(self, max_bytes: int) -> bytes: ...

    async def write(self, data: bytes) -> None: ...

    async def write_eof(self) -> None: ...

    def abort(self) -> None: ...


class SocketEndpoint:
    """DuplexEndpoint over an asyncio TCP stream pair."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, label: str):
        self._reader = reader
        self._writer = writer
        self.label = label

    async def read(self, max_bytes: int) -> bytes:
        return await self._reader.read(max_bytes)

    async def write(self, data: bytes) -> None:
        self._writer.write(data)
        await self._writer.drain()

    async def write_eof(self) -> None:
        if self._writer.can_write_eof():
            self._writer.write_eof()
        await self._writer.drain()

    def abort(self) -> None:
        transport = self._writer.transport
        if transport is not None:
            transport.abort()

    async def close(self) -> None:
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            pass


class Termination(Enum):
    CLEAN_EOF_BOTH = "clean_eof_both"
    ERROR_A = "error_a"
    ERROR_B = "error_b"
    CANCELLED = "cancelled"


@dataclass(frozen=True)
class RelayOutcome:
    """Byte counters and termination cause for one completed relay."""

    bytes_a_to_b: int
    bytes_b_to_a: int
    termination: Termination

    def __post_init__(self):
        if self.bytes_a_to_b < 0 or self.bytes_b_to_a < 0:
            raise ValueError("relay byte counters must be non-negative")


class RelayCancelled(asyncio.CancelledError):
    """Cancellation observed mid-relay; carries the partial outcome.

    Subclasses CancelledError so task cancellation semantics stay intact
    while callers shutting a session down can still record the byte
    counters delivered so far.
    """

    def __init__(self, outcome: RelayOutcome):
        super().__init__()
        self.outcome = outcome


async def pump(src: DuplexEndpoint, dst: DuplexEndpoint, buffer_size: int = DEFAULT_BUFFER_SIZE) -> int:
    """Copy bytes from ``src`` to ``dst`` until source EOF, then half-close.

    Returns the number of bytes delivered to ``dst``.  A read or write
    failure aborts the pump with :class:`RelayError` naming the failing
    endpoint and operation.
    """
    if buffer_size < 1:
        raise ValueError("buffer_size must be >= 1")
    copied = 0
    while True:
        try:
            chunk = await src.read(buffer_size)
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            raise RelayError(src.label, "read", exc) from exc
        if not chunk:
            break
        try:
            await dst.write(chunk)
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            raise RelayError(dst.label, "write", exc) from exc
        copied += len(chunk)
    try:
        await dst.write_eof()
    except asyncio.CancelledError:
        raise
    except Exception as exc:
        raise RelayError(dst.label, "write", exc) from exc
    return copied


class _PumpState:
    __slots__ = ("copied", "error", "failed_endpoint")

    def __init__(self):
        self.copied = 0
        self.error: RelayError | None = None
        self.failed_endpoint: DuplexEndpoint | None = None


async def _run_pump(src: DuplexEndpoint, dst: DuplexEndpoint, buffer_size: int, state: _PumpState) -> None:
    # Inlined variant of pump() that keeps the byte count and failing
    # endpoint observable even when the task is cancelled mid-transfer.
    while True:
        try:
            chunk = await src.read(buffer_size)
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            state.error = RelayError(src.label, "read", exc)
            state.failed_endpoint = src
            raise state.error from exc
        if not chunk:
            break
        try:
            await dst.write(chunk)
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            state.error = RelayError(dst.label, "write", exc)
            state.failed_endpoint = dst
            raise state.error from exc
        state.copied += len(chunk)
    try:
        await dst.write_eof()
    except asyncio.CancelledError:
        raise
    except Exception as exc:
        state.error = RelayError(dst.label, "write", exc)
        state.failed_endpoint = dst
        raise state.error from exc


async def bidirectional_copy(
    a: DuplexEndpoint,
    b: DuplexEndpoint,
    buffer_size: int = DEFAULT_BUFFER_SIZE,
    drain_grace: float = DEFAULT_DRAIN_GRACE,
) -> RelayOutcome:
    """Relay bytes in both directions between ``a`` and ``b``.

    When one direction reaches EOF its sink is half-closed and the other
    direction keeps running to its own EOF.  If one pump errors, the
    opposite pump gets ``drain_grace`` seconds to finish before being
    cancelled, and the outcome records which endpoint failed.
    """
    state_ab = _PumpState()
    state_ba = _PumpState()
    task_ab = asyncio.ensure_future(_run_pump(a, b, buffer_size, state_ab))
    task_ba = asyncio.ensure_future(_run_pump(b, a, buffer_size, state_ba))
    tasks = {task_ab, task_ba}

    try:
        done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
        failed = [t for t in done if not t.cancelled() and t.exception() is not None]
        if failed and pending:
            # One direction died; give the survivor a bounded drain, then
            # cut it off so a dead peer cannot wedge the session.
            _, still_pending = await asyncio.wait(pending, timeout=drain_grace)
            for t in still_pending:
                t.cancel()
            await asyncio.gather(*pending, return_exceptions=True)
        elif pending:
            await asyncio.gather(*pending, return_exceptions=True)
    except asyncio.CancelledError:
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        a.abort()
        b.abort()
        raise RelayCancelled(
            RelayOutcome(state_ab.copied, state_ba.copied, Termination.CANCELLED)
        ) from None

    failed_endpoint = state_ab.failed_endpoint or state_ba.failed_endpoint
    first_error = state_ab.error or state_ba.error

    if failed_endpoint is None:
        termination = Termination.CLEAN_EOF_BOTH
    else:
        termination = Termination.ERROR_A if failed_endpoint is a else Termination.ERROR_B
        # The surviving peer may still be blocked on a half-open stream;
        # abort both so resources are released promptly.
        a.abort()
        b.abort()
        log.debug("relay %s<->%s terminated by %s", a.label, b.label, first_error)

    return RelayOutcome(
        bytes_a_to_b=state_ab.copied,
        bytes_b_to_a=state_ba.copied,
        termination=termination,
    )
