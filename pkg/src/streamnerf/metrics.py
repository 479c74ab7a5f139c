"""Image-quality metric and wall-clock timers."""

from __future__ import annotations

import math
import time
from contextlib import contextmanager

import numpy as np

PSNR_CAP_DB = 99.0


def _rgb01(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img[..., :3].astype(np.float64) / 255.0
    return np.asarray(img[..., :3], dtype=np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, peak 1.0, RGB channels only.

    ``uint8`` inputs are scaled to [0, 1]; float inputs are taken as already
    normalized. Identical images give ``PSNR_CAP_DB``.
    """
    a, b = _rgb01(a), _rgb01(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def format_db(value: float) -> str:
    return f"{value:.2f}"


class Stopwatch:
    """Accumulates named wall-clock spans."""

    def __init__(self):
        self.spans: dict[str, float] = {}

    @contextmanager
    def span(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.spans[name] = self.spans.get(name, 0.0) + time.perf_counter() - t0

    def __getitem__(self, name):
        return self.spans.get(name, 0.0)
