"""Recording files and the TCP emulator that replays them like the headset would.

Recording file (little-endian)::

    "HLNS" | version u16 | intrinsics response (40 bytes) | count u32 | entity * count
"""

from __future__ import annotations

import logging
import select
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .wire import (
    INSTRUCTION,
    INTRINSICS,
    IntrinsicsResponse,
    Opcode,
    ProtocolError,
    decode_entity,
    decode_instruction,
    decode_intrinsics,
    encode_entity,
    encode_intrinsics,
    NeedMoreData,
    payload_size,
)

log = logging.getLogger(__name__)

MAGIC = b"HLNS"
VERSION = 1
_PREAMBLE = struct.Struct("<4sH")
_COUNT = struct.Struct("<I")


class RecordingError(ValueError):
    pass


@dataclass
class Recording:
    intrinsics: IntrinsicsResponse
    entities: list = field(default_factory=list)

    def __post_init__(self):
        expected = payload_size(self.width, self.height)
        last = -1
        for i, e in enumerate(self.entities):
            if e.payload_size != expected:
                raise RecordingError(f"entity {i}: frame size differs from the recording")
            if e.timestamp < last:
                raise RecordingError(f"entity {i}: timestamp goes backwards")
            last = e.timestamp

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def __len__(self):
        return len(self.entities)

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            encode_intrinsics(self.intrinsics) == encode_intrinsics(other.intrinsics)
            and self.entities == other.entities
        )


def save_recording(rec: Recording, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION))
        fh.write(encode_intrinsics(rec.intrinsics))
        fh.write(_COUNT.pack(len(rec.entities)))
        for e in rec.entities:
            fh.write(encode_entity(e))


def load_recording(path) -> Recording:
    data = Path(path).read_bytes()
    head = _PREAMBLE.size + INTRINSICS.size + _COUNT.size
    if len(data) < head:
        raise RecordingError(f"{path}: truncated header")
    magic, version = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise RecordingError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RecordingError(f"{path}: unsupported version {version}")
    try:
        intr = decode_intrinsics(data[_PREAMBLE.size:_PREAMBLE.size + INTRINSICS.size])
    except ProtocolError as exc:
        raise RecordingError(f"{path}: bad intrinsics block ({exc})") from None
    (count,) = _COUNT.unpack_from(data, _PREAMBLE.size + INTRINSICS.size)
    view = memoryview(data)
    offset = head
    entities = []
    for i in range(count):
        try:
            e, used = decode_entity(view[offset:], intr.width, intr.height)
        except NeedMoreData:
            raise RecordingError(f"{path}: truncated in entity {i}") from None
        except ProtocolError as exc:
            raise RecordingError(f"{path}: entity {i}: {exc}") from None
        entities.append(e)
        offset += used
    if offset != len(data):
        raise RecordingError(f"{path}: {len(data) - offset} trailing bytes after {count} entities")
    return Recording(intr, entities)


@dataclass
class ReplayPlan:
    """Which entities to send and how fast.

    ``fps`` may be any positive rational; ``start``/``stop`` are an inclusive
    index range (``stop`` None means the last entity).
    """

    fps: Fraction | float = 30
    start: int = 0
    stop: int | None = None
    drop: frozenset = frozenset()

    def __post_init__(self):
        self.fps = Fraction(self.fps).limit_denominator(10_000)
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        self.drop = frozenset(self.drop)

    def indices(self, n_entities: int) -> list[int]:
        stop = n_entities - 1 if self.stop is None else self.stop
        if n_entities == 0 and self.start == 0 and self.stop is None:
            return []
        if not (0 <= self.start <= stop < n_entities):
            raise ValueError(f"range [{self.start}, {stop}] outside recording of {n_entities}")
        if not all(self.start <= d <= stop for d in self.drop):
            raise ValueError("drop list must lie inside the replay range")
        return [i for i in range(self.start, stop + 1) if i not in self.drop]

    def nominal_duration(self, n_entities: int) -> float:
        return len(self.indices(n_entities)) / float(self.fps)


@dataclass
class SessionSummary:
    frames_sent: int = 0
    send_times: list = field(default_factory=list)
    intrinsics_queries: int = 0
    stopped_by_client: bool = False
    error: str | None = None

    @property
    def intervals(self) -> list[float]:
        t = self.send_times
        return [b - a for a, b in zip(t, t[1:])]


class EmulatorServer:
    """One-client-per-session TCP server over a recording."""

    def __init__(self, recording: Recording, plan: ReplayPlan | None = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.recording = recording
        self.plan = plan or ReplayPlan()
        self._indices = self.plan.indices(len(recording))
        self._encoded: dict[int, bytes] = {}
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]

    def close(self) -> None:
        self._listener.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def serve_once(self, accept_timeout: float | None = None) -> SessionSummary:
        self._listener.settimeout(accept_timeout)
        conn, _ = self._listener.accept()
        conn.settimeout(None)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        summary = SessionSummary()
        try:
            self._session(conn, summary)
        except (ProtocolError, OSError) as exc:
            summary.error = f"{type(exc).__name__}: {exc}"
            log.warning("session ended with error: %s", summary.error)
        finally:
            conn.close()
        return summary

    def serve_in_thread(self, accept_timeout: float | None = None):
        """Run :meth:`serve_once` on a thread; returns (thread, result dict)."""
        result = {}

        def target():
            try:
                result["summary"] = self.serve_once(accept_timeout)
            except Exception as exc:  # surfaced to the caller through result
                result["error"] = exc

        t = threading.Thread(target=target, name="emulator", daemon=True)
        t.start()
        return t, result

    def _read_instruction(self, conn):
        data = b""
        while len(data) < INSTRUCTION.size:
            chunk = conn.recv(INSTRUCTION.size - len(data))
            if not chunk:
                return None
            data += chunk
        return decode_instruction(data)

    def _session(self, conn, summary):
        rec = self.recording
        while True:
            instr = self._read_instruction(conn)
            if instr is None or instr.opcode is Opcode.STOP_STREAM:
                return
            if instr.opcode is Opcode.QUERY_INTRINSICS:
                conn.sendall(encode_intrinsics(rec.intrinsics))
                summary.intrinsics_queries += 1
                continue
            if (instr.width, instr.height) != (rec.width, rec.height):
                raise ProtocolError(
                    f"client asked for {instr.width}x{instr.height}, recording is {rec.width}x{rec.height}"
                )
            self._stream(conn, summary)
            return

    def _stream(self, conn, summary):
        period = 1.0 / float(self.plan.fps)
        t0 = time.perf_counter()
        for k, idx in enumerate(self._indices):
            due = t0 + k * period
            while True:
                now = time.perf_counter()
                if now >= due:
                    break
                if self._stop_requested(conn, min(due - now, 0.05)):
                    summary.stopped_by_client = True
                    return
            payload = self._encoded.get(idx)
            if payload is None:
                payload = self._encoded[idx] = encode_entity(self.recording.entities[idx])
            summary.send_times.append(time.perf_counter())
            conn.sendall(payload)
            summary.frames_sent += 1

    def _stop_requested(self, conn, wait: float) -> bool:
        readable, _, _ = select.select([conn], [], [], max(wait, 0.0))
        if not readable:
            return False
        instr = self._read_instruction(conn)
        if instr is None or instr.opcode is Opcode.STOP_STREAM:
            return True
        raise ProtocolError(f"unexpected {instr.opcode.name} during streaming")


def serve(recording: Recording, plan: ReplayPlan, host: str = "127.0.0.1", port: int = 0,
          accept_timeout: float | None = None) -> SessionSummary:
    with EmulatorServer(recording, plan, host, port) as srv:
        return srv.serve_once(accept_timeout)
