"""NV12 <-> RGBA conversion (BT.601 limited range, nearest chroma upsampling)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class Nv12Frame:
    width: int
    height: int
    y_plane: bytes
    uv_plane: bytes

    def __post_init__(self):
        if self.width % 2 or self.height % 2 or self.width <= 0 or self.height <= 0:
            raise ValueError(f"NV12 needs positive even dimensions, got {self.width}x{self.height}")
        if len(self.y_plane) != self.width * self.height:
            raise ValueError("Y plane length mismatch")
        if len(self.uv_plane) != self.width * self.height // 2:
            raise ValueError("UV plane length mismatch")

    @classmethod
    def from_bytes(cls, data: bytes, width: int, height: int) -> "Nv12Frame":
        n = width * height
        if len(data) != n * 3 // 2:
            raise ValueError(f"expected {n * 3 // 2} bytes for {width}x{height}, got {len(data)}")
        return cls(width, height, bytes(data[:n]), bytes(data[n:]))

    def to_bytes(self) -> bytes:
        return self.y_plane + self.uv_plane


def nv12_to_rgba(frame: Nv12Frame) -> np.ndarray:
    """Decode to an (H, W, 4) uint8 array with alpha 255."""
    return _kernels.nv12_to_rgba(frame.y_plane, frame.uv_plane, frame.width, frame.height)


def rgba_to_nv12(img: np.ndarray) -> Nv12Frame:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 4:
        raise ValueError(f"expected (H, W, 4) RGBA, got shape {img.shape}")
    height, width = img.shape[:2]
    if width % 2 or height % 2:
        raise ValueError(f"NV12 needs even dimensions, got {width}x{height}")
    y, uv = _kernels.rgba_to_nv12(img)
    return Nv12Frame(width, height, y, uv)
