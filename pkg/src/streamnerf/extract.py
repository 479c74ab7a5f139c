"""Point-cloud extraction from a trained field, PLY output and timing sweep.

Rays are drawn at random over the pixels of the training frames and
marched in short segments; a ray ends where transmittance first falls
below one half. Rays that never get there contribute nothing.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import generate_rays, unit_to_world
from .field import stratified_samples

TERMINATION_TRANSMITTANCE = 0.5
SEGMENT = 16
_EPS = 1e-10


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3) float64 world meters
    colors: np.ndarray  # (N, 3) uint8
    sources: np.ndarray  # (N, 3) int64: frame, u, v

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class ExtractionReport:
    target_rays: int
    hit_points: int
    wall_time: float

    @property
    def hit_ratio(self) -> float:
        return self.hit_points / self.target_rays if self.target_rays else 0.0


def march_rays(rf, origins, dirs, t_near, t_far, n_samples=128, threshold=TERMINATION_TRANSMITTANCE,
               segment=SEGMENT):
    """Find where each ray's transmittance first drops below ``threshold``.

    Returns ``(hit, t_hit, rgb)``: mask of terminated rays, unit-space depth
    of the crossing and the color integrated up to it, renormalized by the
    accumulated weight. Samples are bin midpoints, so the result is
    deterministic. Density is evaluated segment by segment and only for
    rays still marching; color only where a sample carries weight.
    """
    n = origins.shape[0]
    dt = rf.dtype
    t, delta = stratified_samples(t_near, t_far, n_samples, None, np.float64)
    trans = np.ones(n)
    acc_rgb = np.zeros((n, 3))
    acc_w = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    t_hit = np.full(n, np.nan)
    active = np.flatnonzero(np.asarray(t_far) > np.asarray(t_near))
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    for s0 in range(0, n_samples, segment):
        if active.size == 0:
            break
        s1 = min(s0 + segment, n_samples)
        ts = t[active, s0:s1]
        ds = delta[active, s0:s1]
        pts = o[active, None, :] + ts[:, :, None] * d[active, None, :]
        k = s1 - s0
        sigma, geo = rf.density_and_features(pts.reshape(-1, 3).astype(dt))
        sigma = sigma.astype(np.float64).reshape(-1, k)
        tau = sigma * ds
        # transmittance before each sample in the segment
        excl = np.cumsum(np.concatenate([np.zeros((active.size, 1)), tau[:, :-1]], axis=1), axis=1)
        t_before = trans[active, None] * np.exp(-excl)
        alpha = 1 - np.exp(-tau)
        w = t_before * alpha
        t_after = t_before * (1 - alpha)
        crossed = t_after < threshold
        first = np.where(crossed.any(axis=1), crossed.argmax(axis=1), k)
        # weights count up to and including the terminating sample
        keep = np.arange(k)[None, :] <= first[:, None]
        w = np.where(keep, w, 0.0)
        need = w.reshape(-1) > 1e-6
        if need.any():
            dirs_rep = np.repeat(d[active], k, axis=0)[need]
            rgb = np.zeros((active.size * k, 3))
            rgb[need] = rf.color(geo[need], dirs_rep.astype(dt))
            acc_rgb[active] += np.einsum("rk,rkc->rc", w, rgb.reshape(-1, k, 3))
        acc_w[active] += w.sum(axis=1)
        done = first < k
        rows = np.flatnonzero(done)
        if rows.size:
            ridx = active[rows]
            j = first[rows]
            tb = t_before[rows, j]
            sg = sigma[rows, j]
            # constant density inside the stratum: solve T(t) = threshold
            t0 = ts[rows, j] - 0.5 * ds[rows, j]
            with np.errstate(divide="ignore", invalid="ignore"):
                dist = np.log(tb / threshold) / sg
            dist = np.clip(np.nan_to_num(dist, nan=0.0, posinf=0.0), 0.0, ds[rows, j])
            t_hit[ridx] = t0 + dist
            hit[ridx] = True
        trans[active] = t_after[:, -1]
        active = active[~done]
    color = acc_rgb / np.maximum(acc_w, _EPS)[:, None]
    return hit, t_hit, color


def extract_points(rf, buffer, box, intr, target: int, seed: int = 0, n_samples: int = 128,
                   frames=None, chunk: int = 1 << 15) -> tuple[PointCloud, ExtractionReport]:
    """Sample ``target`` random (frame, pixel) rays and keep those that terminate.

    ``frames`` restricts sampling to the given buffer indices (default: all
    published frames). Output order follows ray index, independent of chunking.
    """
    t_start = time.perf_counter()
    pool = np.arange(buffer.published_count) if frames is None else np.asarray(frames)
    if pool.size == 0:
        raise ValueError("no frames with valid poses to sample rays from")
    rng = np.random.default_rng(seed)
    f = pool[rng.integers(0, pool.size, target)]
    u = rng.integers(0, buffer.width, target)
    v = rng.integers(0, buffer.height, target)
    positions, colors, sources = [], [], []
    for s in range(0, target, chunk):
        e = min(s + chunk, target)
        fs = f[s:e]
        o, d, tn, tf = generate_rays(intr, buffer.rotations[fs], buffer.centers[fs], box, u[s:e], v[s:e])
        hit, t_hit, rgb = march_rays(rf, o, d, tn, tf, n_samples)
        if hit.any():
            q = o[hit] + t_hit[hit, None] * d[hit]
            positions.append(unit_to_world(box, q))
            colors.append(np.clip(np.floor(rgb[hit] * 255 + 0.5), 0, 255).astype(np.uint8))
            sources.append(np.stack([fs[hit], u[s:e][hit], v[s:e][hit]], axis=1))
    if positions:
        cloud = PointCloud(np.concatenate(positions), np.concatenate(colors), np.concatenate(sources))
    else:
        cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros((0, 3), np.int64))
    report = ExtractionReport(target, len(cloud), time.perf_counter() - t_start)
    return cloud, report


# -- PLY ---------------------------------------------------------------------

PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def ply_bytes(cloud: PointCloud) -> bytes:
    if len(cloud) == 0:
        raise ValueError("refusing to write an empty point cloud")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    body = np.empty(len(cloud), dtype=PLY_VERTEX)
    for i, k in enumerate("xyz"):
        body[k] = cloud.positions[:, i]
    for i, k in enumerate(("red", "green", "blue")):
        body[k] = cloud.colors[:, i]
    return header.encode("ascii") + body.tobytes()


def write_ply(cloud: PointCloud, path) -> None:
    data = ply_bytes(cloud)
    Path(path).write_bytes(data)


def read_ply(path) -> PointCloud:
    """Reader for the exact layout :func:`write_ply` produces."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[:2] != ["ply", "format binary_little_endian 1.0"]:
        raise ValueError(f"{path}: not a binary little-endian PLY")
    n = next(int(line.split()[2]) for line in header if line.startswith("element vertex"))
    body = np.frombuffer(data, dtype=PLY_VERTEX, count=n, offset=end)
    pos = np.stack([body["x"], body["y"], body["z"]], axis=1).astype(np.float64)
    col = np.stack([body["red"], body["green"], body["blue"]], axis=1)
    return PointCloud(pos, col, np.zeros((n, 3), np.int64))


# -- timing sweep ------------------------------------------------------------


@dataclass
class BenchRow:
    target: int
    hits: int
    seconds: float


def benchmark_extraction(rf, buffer, box, intr, targets, seed: int = 0, n_samples: int = 128,
                         frames=None) -> list[BenchRow]:
    """Time :func:`extract_points` per target count; no file output is timed."""
    rows = []
    for target in targets:
        t0 = time.perf_counter()
        cloud, _ = extract_points(rf, buffer, box, intr, int(target), seed, n_samples, frames)
        rows.append(BenchRow(int(target), len(cloud), time.perf_counter() - t0))
    return rows


def bench_csv(rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["target", "hits", "seconds"])
    for r in rows:
        w.writerow([r.target, r.hits, f"{r.seconds:.6f}"])
    return out.getvalue()
