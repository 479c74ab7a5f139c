"""Byte-level codec for the sensor stream.

Entity layout (little-endian)::

    offset  size        field
    0       8           timestamp      u64, 100 ns ticks
    8       4           payload_size   u32 = len(nv12) + 16 + 64
    12      W*H*3/2     nv12           Y plane then interleaved UV plane
    ...     16          intrinsics4    4 x f32  (f_x, f_y, c_x, c_y)
    ...     64          pose           16 x f32, row-major 4x4 camera-to-world

Instruction layout (6 bytes)::

    opcode u8 | width u16 | height u16 | fps u8

Intrinsics response (40 bytes)::

    f_x f_y c_x c_y k_1 k_2 p_1 p_2 k_3 (9 x f32) | width u16 | height u16
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER = struct.Struct("<QI")
INSTRUCTION = struct.Struct("<BHHB")
INTRINSICS = struct.Struct("<9f2H")
INTRINSICS4_BYTES = 16
POSE_BYTES = 64
TAIL_BYTES = INTRINSICS4_BYTES + POSE_BYTES


class ProtocolError(ValueError):
    """Fatal violation of the wire format."""


class Opcode(enum.IntEnum):
    START_STREAM = 0x01
    QUERY_INTRINSICS = 0x02
    STOP_STREAM = 0x03


def nv12_size(width: int, height: int) -> int:
    return width * height * 3 // 2


def payload_size(width: int, height: int) -> int:
    return nv12_size(width, height) + TAIL_BYTES


@dataclass(eq=False)
class StreamEntity:
    timestamp: int
    nv12: bytes
    intrinsics4: np.ndarray  # (4,) float32
    pose: np.ndarray  # (4, 4) float32, row-major
    payload_size: int = -1

    def __post_init__(self):
        self.nv12 = bytes(self.nv12)
        self.intrinsics4 = np.asarray(self.intrinsics4, dtype="<f4").reshape(4)
        self.pose = np.asarray(self.pose, dtype="<f4").reshape(4, 4)
        if self.payload_size < 0:
            self.payload_size = len(self.nv12) + TAIL_BYTES
        if not 0 <= self.timestamp < 2**64:
            raise ValueError(f"timestamp {self.timestamp} does not fit in u64")

    def __eq__(self, other):
        # bit-exact: NaN payloads compare equal to themselves
        if not isinstance(other, StreamEntity):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.payload_size == other.payload_size
            and self.nv12 == other.nv12
            and self.intrinsics4.tobytes() == other.intrinsics4.tobytes()
            and self.pose.tobytes() == other.pose.tobytes()
        )


def encode_entity(e: StreamEntity) -> bytes:
    if e.payload_size != len(e.nv12) + TAIL_BYTES:
        raise ProtocolError(
            f"payload_size {e.payload_size} inconsistent with nv12 length {len(e.nv12)}"
        )
    return b"".join(
        (
            HEADER.pack(e.timestamp, e.payload_size),
            e.nv12,
            e.intrinsics4.astype("<f4").tobytes(),
            e.pose.astype("<f4").tobytes(),
        )
    )


class NeedMoreData(Exception):
    """Raised by :func:`decode_entity` when the buffer ends mid-message."""


def decode_entity(buf, width: int, height: int) -> tuple[StreamEntity, int]:
    """Decode one entity from the start of ``buf``.

    Returns the entity and the number of bytes consumed. Raises
    :class:`NeedMoreData` on a short buffer and :class:`ProtocolError` when
    the header disagrees with the negotiated frame size.
    """
    view = memoryview(buf)
    if len(view) < HEADER.size:
        raise NeedMoreData(HEADER.size - len(view))
    timestamp, size = HEADER.unpack_from(view, 0)
    expected = payload_size(width, height)
    if size != expected:
        raise ProtocolError(f"payload_size {size} != {expected} for {width}x{height}")
    total = HEADER.size + size
    if len(view) < total:
        raise NeedMoreData(total - len(view))
    img_end = HEADER.size + nv12_size(width, height)
    nv12 = bytes(view[HEADER.size:img_end])
    intr = np.frombuffer(view[img_end:img_end + INTRINSICS4_BYTES], dtype="<f4").copy()
    pose = np.frombuffer(view[img_end + INTRINSICS4_BYTES:total], dtype="<f4").reshape(4, 4).copy()
    return StreamEntity(timestamp, nv12, intr, pose, size), total


class EntityDecoder:
    """Incremental decoder for one connection.

    Feed arbitrary chunks; complete entities come out in order and any
    trailing partial message is kept for the next call.
    """

    def __init__(self, width: int, height: int):
        if width % 2 or height % 2:
            raise ValueError("NV12 frames need even width and height")
        self.width = width
        self.height = height
        self._buf = bytearray()

    @property
    def pending(self) -> int:
        return len(self._buf)

    def feed(self, data) -> list[StreamEntity]:
        self._buf += data
        out = []
        offset = 0
        view = memoryview(self._buf)
        try:
            while True:
                try:
                    entity, used = decode_entity(view[offset:], self.width, self.height)
                except NeedMoreData:
                    break
                out.append(entity)
                offset += used
        finally:
            view.release()
        del self._buf[:offset]
        return out


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    width: int = 0
    height: int = 0
    fps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "opcode", Opcode(self.opcode))
        if self.opcode is not Opcode.START_STREAM and (self.width or self.height or self.fps):
            raise ValueError(f"{self.opcode.name} carries no parameters")
        if not (0 <= self.width < 2**16 and 0 <= self.height < 2**16 and 0 <= self.fps < 2**8):
            raise ValueError("instruction field out of range")

    @classmethod
    def start(cls, width: int, height: int, fps: int) -> "Instruction":
        return cls(Opcode.START_STREAM, width, height, fps)


def encode_instruction(i: Instruction) -> bytes:
    return INSTRUCTION.pack(i.opcode, i.width, i.height, i.fps)


def decode_instruction(data) -> Instruction:
    if len(data) != INSTRUCTION.size:
        raise ProtocolError(f"instruction must be {INSTRUCTION.size} bytes, got {len(data)}")
    op, width, height, fps = INSTRUCTION.unpack(bytes(data))
    try:
        opcode = Opcode(op)
    except ValueError:
        raise ProtocolError(f"unknown opcode 0x{op:02X}") from None
    try:
        return Instruction(opcode, width, height, fps)
    except ValueError as exc:
        raise ProtocolError(str(exc)) from None


@dataclass(frozen=True)
class IntrinsicsResponse:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    dist: tuple = field(default=(0.0, 0.0, 0.0, 0.0, 0.0))  # k1, k2, p1, p2, k3

    def __post_init__(self):
        object.__setattr__(self, "dist", tuple(float(d) for d in self.dist))
        if len(self.dist) != 5:
            raise ValueError("expected 5 distortion coefficients (k1, k2, p1, p2, k3)")
        values = (self.fx, self.fy, self.cx, self.cy, *self.dist)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @property
    def values9(self) -> tuple:
        k1, k2, p1, p2, k3 = self.dist
        return (self.fx, self.fy, self.cx, self.cy, k1, k2, p1, p2, k3)


def encode_intrinsics(r: IntrinsicsResponse) -> bytes:
    return INTRINSICS.pack(*r.values9, r.width, r.height)


def decode_intrinsics(data) -> IntrinsicsResponse:
    if len(data) != INTRINSICS.size:
        raise ProtocolError(f"intrinsics response must be {INTRINSICS.size} bytes, got {len(data)}")
    fx, fy, cx, cy, k1, k2, p1, p2, k3, width, height = INTRINSICS.unpack(bytes(data))
    try:
        return IntrinsicsResponse(fx, fy, cx, cy, width, height, (k1, k2, p1, p2, k3))
    except ValueError as exc:
        raise ProtocolError(str(exc)) from None
