"""Stream client: receives entities, validates poses and fills the frame buffer."""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .camera import CameraIntrinsics, Pose, convert_device_pose
from .nv12 import Nv12Frame, nv12_to_rgba
from .wire import (
    INTRINSICS,
    EntityDecoder,
    Instruction,
    Opcode,
    ProtocolError,
    decode_intrinsics,
    encode_instruction,
)

log = logging.getLogger(__name__)

BOTTOM_ROW_TOL = 1e-5
ORTHONORMAL_TOL = 1e-3


@dataclass(frozen=True)
class PoseRejection:
    reason: str

    def __bool__(self):
        return False


def validate_pose(m) -> Pose | PoseRejection:
    """Accept a 4x4 camera-to-world matrix or say why not."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        return PoseRejection(f"expected 4x4 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        return PoseRejection("non-finite entry")
    if np.max(np.abs(m[3] - (0, 0, 0, 1))) > BOTTOM_ROW_TOL:
        return PoseRejection("bottom row is not (0, 0, 0, 1)")
    r = m[:3, :3]
    err = np.max(np.abs(r.T @ r - np.eye(3)))
    if err > ORTHONORMAL_TOL:
        return PoseRejection(f"rotation not orthonormal (max deviation {err:.3g})")
    det = np.linalg.det(r)
    if det <= 0:
        return PoseRejection(f"rotation is a reflection (det {det:.3g})")
    return Pose(r, m[:3, 3])


class FrameBuffer:
    """Fixed-capacity, append-only store of decoded frames and poses.

    Storage is allocated up front. The producer fills slots past
    ``published_count`` and then bumps the counter under a lock, so a
    reader that snapshots ``published_count`` sees only complete frames.
    Published slots are never written again.
    """

    def __init__(self, width: int, height: int, capacity: int = 400):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.width = width
        self.height = height
        self.capacity = capacity
        self.rgba = np.zeros((capacity, height, width, 4), dtype=np.uint8)
        self.rotations = np.zeros((capacity, 3, 3))
        self.centers = np.zeros((capacity, 3))
        self.timestamps = np.zeros(capacity, dtype=np.uint64)
        self._count = 0
        self._publications: list[int] = []
        self._cond = threading.Condition()
        self.training_started = threading.Event()
        self.end_of_stream = threading.Event()

    @property
    def published_count(self) -> int:
        return self._count

    @property
    def publications(self) -> list[int]:
        """Cumulative frame count after each publication."""
        with self._cond:
            return list(self._publications)

    def __len__(self):
        return self._count

    def publish(self, frames) -> int:
        """Append a batch of ``(rgba, pose, timestamp)`` atomically.

        Returns how many were stored; the remainder did not fit.
        """
        start = self._count
        n = min(len(frames), self.capacity - start)
        for k in range(n):
            rgba, pose, ts = frames[k]
            self.rgba[start + k] = rgba
            self.rotations[start + k] = pose.rotation
            self.centers[start + k] = pose.translation
            self.timestamps[start + k] = ts
        if n:
            with self._cond:
                self._count = start + n
                self._publications.append(self._count)
                self._cond.notify_all()
            self.training_started.set()
        return n

    def finish(self) -> None:
        with self._cond:
            self.end_of_stream.set()
            self._cond.notify_all()

    def wait_for_publication(self, n_publications: int, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(
                lambda: len(self._publications) >= n_publications or self.end_of_stream.is_set(),
                timeout,
            )

    def pose(self, index: int) -> Pose:
        if not 0 <= index < self._count:
            raise IndexError(index)
        return Pose(self.rotations[index], self.centers[index])


@dataclass
class StreamReport:
    received: int = 0
    buffered: int = 0
    rejected: int = 0
    dropped: int = 0
    publications: list = field(default_factory=list)
    rejection_reasons: dict = field(default_factory=dict)
    intrinsics: CameraIntrinsics | None = None
    first_frame_time: float | None = None
    last_frame_time: float | None = None
    training_start_time: float | None = None
    error: str | None = None

    @property
    def stream_seconds(self) -> float:
        if self.first_frame_time is None:
            return 0.0
        return self.last_frame_time - self.first_frame_time

    def as_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = None if self.intrinsics is None else asdict(self.intrinsics)
        d["stream_seconds"] = self.stream_seconds
        return d


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ProtocolError("connection closed mid-message")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def query_intrinsics(sock: socket.socket) -> CameraIntrinsics:
    sock.sendall(encode_instruction(Instruction(Opcode.QUERY_INTRINSICS)))
    return CameraIntrinsics.from_response(decode_intrinsics(_recv_exact(sock, INTRINSICS.size)))


class FrameStager:
    """Validates, converts and batches decoded entities into a buffer."""

    def __init__(self, buffer: FrameBuffer, batch_n: int, report: StreamReport,
                 device_poses: bool = False):
        if batch_n < 1:
            raise ValueError("batch_n must be >= 1")
        self.buffer = buffer
        self.batch_n = batch_n
        self.report = report
        self.device_poses = device_poses
        self._staged: list = []

    def add(self, entity) -> None:
        rep = self.report
        rep.received += 1
        now = time.perf_counter()
        if rep.first_frame_time is None:
            rep.first_frame_time = now
        rep.last_frame_time = now
        pose = validate_pose(entity.pose)
        if not pose:
            rep.rejected += 1
            rep.rejection_reasons[pose.reason] = rep.rejection_reasons.get(pose.reason, 0) + 1
            return
        if self.device_poses:
            pose = convert_device_pose(pose)
        frame = Nv12Frame.from_bytes(entity.nv12, self.buffer.width, self.buffer.height)
        self._staged.append((nv12_to_rgba(frame), pose, entity.timestamp))
        if len(self._staged) >= self.batch_n:
            self.flush()

    def flush(self) -> None:
        if not self._staged:
            return
        rep = self.report
        first = self.buffer.published_count == 0
        stored = self.buffer.publish(self._staged)
        rep.buffered += stored
        rep.dropped += len(self._staged) - stored
        if stored:
            rep.publications.append(stored)
            if first:
                rep.training_start_time = time.perf_counter()
        self._staged = []


def run_stream(host: str, port: int, batch_n: int, buffer: FrameBuffer | None = None,
               fps: int = 30, width: int | None = None, height: int | None = None,
               device_poses: bool = False, connect_timeout: float = 10.0,
               on_buffer=None, capacity: int = 400) -> tuple[StreamReport, FrameBuffer]:
    """Query intrinsics, request the stream and drain it into ``buffer``.

    The buffer is created after the intrinsics query when not given (its
    size comes from the camera). ``on_buffer`` is called with it as soon as
    it exists so a trainer can attach before frames arrive.
    """
    report = StreamReport()
    sock = _connect(host, port, connect_timeout)
    try:
        intr = query_intrinsics(sock)
        report.intrinsics = intr
        w = width or intr.width
        h = height or intr.height
        if buffer is None:
            buffer = FrameBuffer(w, h, capacity)
        if on_buffer is not None:
            on_buffer(buffer, intr)
        sock.sendall(encode_instruction(Instruction.start(buffer.width, buffer.height, fps)))
        decoder = EntityDecoder(buffer.width, buffer.height)
        stager = FrameStager(buffer, batch_n, report, device_poses)
        try:
            while True:
                data = sock.recv(1 << 20)
                if not data:
                    break
                for entity in decoder.feed(data):
                    stager.add(entity)
            if decoder.pending:
                raise ProtocolError(f"stream ended with {decoder.pending} bytes of a partial entity")
        except (ProtocolError, ValueError, OSError) as exc:
            report.error = f"{type(exc).__name__}: {exc}"
            log.error("stream aborted: %s", report.error)
        stager.flush()
    finally:
        sock.close()
        if buffer is not None:
            buffer.finish()
    return report, buffer


def _connect(host, port, timeout):
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            return sock
        except ConnectionRefusedError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.02)
