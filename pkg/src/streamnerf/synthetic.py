"""Analytic stand-in scene: a textured barrel-sized cylinder on black, optionally in a room.

Frames are ray traced exactly from camera poses in the renderer convention,
so the recording comes with ground-truth geometry for distance checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, Pose, SceneBox, look_at, pixel_directions
from .nv12 import rgba_to_nv12
from .server import Recording
from .wire import StreamEntity

TICKS_PER_SECOND = 10_000_000


@dataclass(frozen=True)
class CylinderScene:
    """Barrel-sized textured cylinder on black.

    With ``room=True`` it stands in a closed, textured cube room (floor area
    ``(2 * room_half)**2``) so that rays from any pose end on a surface.
    """

    radius: float = 0.31
    height: float = 0.93
    room_half: float = 1.58
    room: bool = False

    @property
    def extent(self) -> float:
        """Largest dimension of the drawn geometry, in meters."""
        if self.room:
            return 2 * self.room_half
        return max(2 * self.radius, self.height)

    def box(self, margin: float = 1.03) -> SceneBox:
        """Cube scene box around the cylinder (or the whole room)."""
        if self.room:
            return SceneBox((0.0, 0.0, self.room_half), 1.0 / (2 * self.room_half * margin))
        edge = max(2 * self.radius, self.height) * margin * 1.3
        return SceneBox((0.0, 0.0, self.height / 2), 1.0 / edge)

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit along world rays: returns (t, rgb); t is inf on a miss."""
        n = origins.shape[0]
        t_best = np.full(n, np.inf)
        rgb = np.zeros((n, 3))
        ox, oy, oz = origins.T
        dx, dy, dz = dirs.T
        r2max = self.radius ** 2

        def take(ok, t, color_fn):
            nonlocal t_best
            ok = ok & (t > 1e-9) & (t < t_best)
            t_best = np.where(ok, t, t_best)
            if ok.any():
                rgb[ok] = color_fn(origins[ok] + t[ok, None] * dirs[ok])

        with np.errstate(invalid="ignore", divide="ignore"):
            a = dx * dx + dy * dy
            b = 2 * (ox * dx + oy * dy)
            c = ox * ox + oy * oy - r2max
            disc = b * b - 4 * a * c
            sq = np.sqrt(np.maximum(disc, 0))
            for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
                z = oz + t * dz
                take((disc >= 0) & (a > 1e-12) & (z >= 0) & (z <= self.height), t, self.coat_color)
            t = (self.height - oz) / dz
            p = origins + t[:, None] * dirs
            take(np.isfinite(t) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= r2max), t, self.top_color)
            if self.room:
                h = self.room_half
                top = 2 * h
                for plane, axis, fn in ((0.0, 2, self.floor_color), (top, 2, self.ceiling_color),
                                        (-h, 0, self.wall_color), (h, 0, self.wall_color),
                                        (-h, 1, self.wall_color), (h, 1, self.wall_color)):
                    t = (plane - origins[:, axis]) / dirs[:, axis]
                    p = origins + t[:, None] * dirs
                    inside = (np.abs(p[:, 0]) <= h + 1e-9) & (np.abs(p[:, 1]) <= h + 1e-9) & (
                        p[:, 2] >= -1e-9) & (p[:, 2] <= top + 1e-9)
                    if axis == 2 and plane == 0.0:
                        inside &= p[:, 0] ** 2 + p[:, 1] ** 2 > r2max
                    take(np.isfinite(t) & inside, t, fn)
        return t_best, rgb

    def coat_color(self, p):
        theta = np.arctan2(p[:, 1], p[:, 0])
        h = p[:, 2] / self.height
        s = theta * self.radius  # arc length
        base = np.array([0.85, 0.68, 0.12])
        # large-scale shading plus a few-centimeter pattern for close-up views
        shade = 0.66 + 0.16 * np.sin(3 * theta) * np.cos(2 * np.pi * h) \
            + 0.14 * np.sin(2 * np.pi * s / 0.07) * np.sin(2 * np.pi * p[:, 2] / 0.06)
        rust = np.clip(np.sin(5 * theta + 4 * h) - 0.55, 0, None)[:, None] * np.array([-0.6, -0.55, 0.0])
        return np.clip(shade[:, None] * base + rust, 0, 1)

    def top_color(self, p):
        r = np.hypot(p[:, 0], p[:, 1]) / self.radius
        v = 0.45 + 0.25 * np.cos(3 * np.pi * r)
        return np.stack([v, v * 0.9, v * 0.5], axis=1)

    # room textures carry enough detail at pixel scale for depth to be recoverable

    def floor_color(self, p):
        x, y = p[:, 0], p[:, 1]
        v = 0.42 + 0.18 * np.sin(2 * np.pi * x / 0.4) * np.sin(2 * np.pi * y / 0.4) \
            + 0.08 * np.sin(2 * np.pi * (x + y) / 0.13)
        return np.stack([v * 0.8, v * 0.85, v], axis=1)

    def wall_color(self, p):
        # arc length along the wall loop, continuous across corners
        s = np.arctan2(p[:, 1], p[:, 0]) * self.room_half
        z = p[:, 2]
        v = 0.4 + 0.18 * np.sin(2 * np.pi * s / 0.35) * np.cos(2 * np.pi * z / 0.45) \
            + 0.07 * np.sin(2 * np.pi * (s - z) / 0.15)
        return np.stack([v * 0.7, v, v * 0.8], axis=1)

    def ceiling_color(self, p):
        v = 0.3 + 0.12 * np.sin(2 * np.pi * p[:, 0] / 0.5) * np.sin(2 * np.pi * p[:, 1] / 0.5)
        return np.stack([v, v, v * 0.9], axis=1)

    def surface_distance(self, pts: np.ndarray) -> np.ndarray:
        """Euclidean distance from world points to the nearest scene surface."""
        pts = np.asarray(pts, dtype=np.float64)
        x, y, z = pts.T
        r = np.hypot(x, y)
        inside = (r <= self.radius) & (z >= 0) & (z <= self.height)
        d_out = np.hypot(np.maximum(r - self.radius, 0), np.maximum(np.maximum(-z, z - self.height), 0))
        d_in = np.minimum(self.radius - r, np.minimum(z, self.height - z))
        d = np.where(inside, d_in, d_out)
        if self.room:
            h = self.room_half
            ax, ay = np.abs(x), np.abs(y)
            in_room = (ax <= h) & (ay <= h) & (z >= 0) & (z <= 2 * h)
            d_room_in = np.minimum(np.minimum(h - ax, h - ay), np.minimum(z, 2 * h - z))
            ex = np.maximum(ax - h, 0)
            ey = np.maximum(ay - h, 0)
            ez = np.maximum(np.maximum(-z, z - 2 * h), 0)
            d_room_out = np.sqrt(ex * ex + ey * ey + ez * ez)
            d = np.minimum(d, np.where(in_room, d_room_in, d_room_out))
        return d

    def object_distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the cylinder alone."""
        return CylinderScene(self.radius, self.height, self.room_half, room=False).surface_distance(pts)


@dataclass
class SyntheticParams:
    n_views: int = 60
    width: int = 64
    height: int = 64
    focal: float | None = None  # px; default 3.0 * width, about 19 degrees across
    # far rings with a long lens: the coat still fills every frame, and each
    # surface point is seen from a wide arc of cameras
    ring_radius: tuple = (1.8, 1.85)
    ring_height: tuple = (0.30, 0.63)
    fps: float = 30.0
    invalid: tuple = ()
    scene: CylinderScene = CylinderScene()


@dataclass
class SyntheticScene:
    recording: Recording
    scene: CylinderScene
    box: SceneBox
    intrinsics: CameraIntrinsics
    poses: list  # valid Pose per entity, None where an invalid pose was injected
    images: np.ndarray  # (N, H, W, 3) float ground-truth renders before NV12


def camera_poses(params: SyntheticParams) -> list[Pose]:
    """Two circular paths around the axis, each looking level at the axis."""
    n = params.n_views
    half = (n + 1) // 2
    poses = []
    for k in range(n):
        ring = 0 if k < half else 1
        j = k if ring == 0 else k - half
        count = half if ring == 0 else n - half
        phi = 2 * np.pi * j / count + ring * np.pi / max(count, 1)
        rad, hgt = params.ring_radius[ring], params.ring_height[ring]
        eye = np.array([rad * np.cos(phi), rad * np.sin(phi), hgt])
        poses.append(look_at(eye, np.array([0.0, 0.0, hgt])))
    return poses


def render_view(scene: CylinderScene, intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    d = pixel_directions(intr).reshape(-1, 3) @ pose.rotation.T
    o = np.broadcast_to(pose.translation, d.shape)
    _, rgb = scene.trace(np.ascontiguousarray(o), d)
    return rgb.reshape(intr.height, intr.width, 3)


def generate_synthetic_scene(params: SyntheticParams | None = None) -> SyntheticScene:
    params = params or SyntheticParams()
    scene = params.scene
    w, h = params.width, params.height
    f = params.focal or 3.0 * w
    intr = CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)
    poses = camera_poses(params)
    invalid = set(params.invalid)
    entities, images, kept = [], [], []
    tick = TICKS_PER_SECOND / params.fps
    for k, pose in enumerate(poses):
        img = render_view(scene, intr, pose)
        images.append(img)
        rgba = np.empty((h, w, 4), dtype=np.uint8)
        rgba[..., :3] = np.clip(np.floor(img * 255 + 0.5), 0, 255)
        rgba[..., 3] = 255
        m = pose.matrix().astype(np.float32)
        if k in invalid:
            m = _invalid_matrix(k)
            kept.append(None)
        else:
            kept.append(pose)
        entities.append(
            StreamEntity(int(k * tick), rgba_to_nv12(rgba).to_bytes(),
                         np.array([intr.fx, intr.fy, intr.cx, intr.cy], dtype=np.float32), m)
        )
    rec = Recording(intr.to_response(), entities)
    return SyntheticScene(rec, scene, scene.box(), intr, kept, np.stack(images))


def _invalid_matrix(k: int) -> np.ndarray:
    # the failure modes seen in captures: NaN-filled and all-zero matrices
    if k % 2:
        return np.full((4, 4), np.nan, dtype=np.float32)
    return np.zeros((4, 4), dtype=np.float32)


def spread_indices(n_total: int, n_pick: int, seed: int = 0) -> tuple:
    """Deterministic pick of ``n_pick`` distinct indices, e.g. for invalid-pose injection."""
    rng = np.random.default_rng(seed)
    return tuple(sorted(int(i) for i in rng.choice(n_total, n_pick, replace=False)))
