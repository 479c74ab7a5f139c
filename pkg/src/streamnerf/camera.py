"""Camera geometry and scene normalization.

Camera frame follows the OpenCV convention: x right, y down, z forward.
Poses are camera-to-world. The scene box maps world meters into the unit
cube the radiance field lives in: ``q = s * (p - center) + 0.5``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

UNDISTORT_ITERATIONS = 8
REPROJECTION_TOL_PX = 1e-3

DEVICE_TO_RENDERER = np.diag([1.0, -1.0, -1.0])


class UndistortionError(ArithmeticError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @classmethod
    def from_response(cls, r) -> "CameraIntrinsics":
        k1, k2, p1, p2, k3 = r.dist
        return cls(r.fx, r.fy, r.cx, r.cy, r.width, r.height, k1, k2, p1, p2, k3)

    def to_response(self):
        from .wire import IntrinsicsResponse

        return IntrinsicsResponse(
            self.fx, self.fy, self.cx, self.cy, self.width, self.height,
            (self.k1, self.k2, self.p1, self.p2, self.k3),
        )

    @property
    def has_distortion(self) -> bool:
        return any((self.k1, self.k2, self.p1, self.p2, self.k3))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


def distort(intr: CameraIntrinsics, x, y):
    """Forward radial + tangential model on normalized coordinates."""
    r2 = x * x + y * y
    radial = 1 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3))
    xd = x * radial + 2 * intr.p1 * x * y + intr.p2 * (r2 + 2 * x * x)
    yd = y * radial + intr.p1 * (r2 + 2 * y * y) + 2 * intr.p2 * x * y
    return xd, yd


def project_normalized(intr: CameraIntrinsics, x, y):
    xd, yd = distort(intr, x, y)
    return intr.fx * xd + intr.cx, intr.fy * yd + intr.cy


def _distort_jacobian(intr, x, y):
    k1, k2, k3, p1, p2 = intr.k1, intr.k2, intr.k3, intr.p1, intr.p2
    r2 = x * x + y * y
    radial = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dradial = k1 + r2 * (2 * k2 + 3 * k3 * r2)  # d radial / d r2
    jxx = radial + 2 * x * x * dradial + 2 * p1 * y + 6 * p2 * x
    jxy = 2 * x * y * dradial + 2 * p1 * x + 2 * p2 * y
    jyx = 2 * x * y * dradial + 2 * p1 * x + 2 * p2 * y
    jyy = radial + 2 * y * y * dradial + 6 * p1 * y + 2 * p2 * x
    return jxx, jxy, jyx, jyy


def undistort_points(intr: CameraIntrinsics, u, v):
    """Invert the distortion model for pixel coordinates (arrays allowed).

    Runs a fixed number of Newton steps on the 2D forward model and checks
    the forward reprojection afterwards.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    xd = (u - intr.cx) / intr.fx
    yd = (v - intr.cy) / intr.fy
    if not intr.has_distortion:
        return xd, yd
    x, y = xd.copy(), yd.copy()
    for _ in range(UNDISTORT_ITERATIONS):
        fx_, fy_ = distort(intr, x, y)
        ex, ey = fx_ - xd, fy_ - yd
        a, b, c, d = _distort_jacobian(intr, x, y)
        det = a * d - b * c
        x = x - (d * ex - b * ey) / det
        y = y - (a * ey - c * ex) / det
    pu, pv = project_normalized(intr, x, y)
    err = np.hypot(pu - u, pv - v)
    if not np.all(np.isfinite(err)) or np.max(err, initial=0.0) > REPROJECTION_TOL_PX:
        raise UndistortionError(
            f"undistortion did not converge (max reprojection error {np.max(err):.3g} px)"
        )
    return x, y


def undistort_pixel(intr: CameraIntrinsics, u: float, v: float) -> tuple[float, float]:
    x, y = undistort_points(intr, u, v)
    return float(x), float(y)


@functools.lru_cache(maxsize=8)
def pixel_directions(intr: CameraIntrinsics) -> np.ndarray:
    """Unit camera-frame ray directions for every pixel, shape (H, W, 3).

    Pixel (i, j) is column i, row j; integer coordinates are pixel centers.
    """
    uu, vv = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                         np.arange(intr.height, dtype=np.float64))
    x, y = undistort_points(intr, uu, vv)
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.setflags(write=False)
    return d


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        return self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def convert_device_pose(pose: Pose) -> Pose:
    """Flip camera y and z axes (graphics-style device frame -> OpenCV frame)."""
    return Pose(pose.rotation @ DEVICE_TO_RENDERER, pose.translation.copy())


@dataclass(frozen=True)
class SceneBox:
    center: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    extent: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.scale > 0:
            raise ValueError("scene scale must be positive")
        if not 0 < self.extent <= 0.5:
            raise ValueError("box extent must lie in (0, 0.5]")

    @property
    def lo(self) -> float:
        return 0.5 - self.extent

    @property
    def hi(self) -> float:
        return 0.5 + self.extent

    @property
    def world_size(self) -> float:
        """Edge length of the box in world meters."""
        return 2 * self.extent / self.scale


def world_to_unit(box: SceneBox, p):
    return box.scale * (np.asarray(p, dtype=np.float64) - np.asarray(box.center)) + 0.5


def unit_to_world(box: SceneBox, q):
    return (np.asarray(q, dtype=np.float64) - 0.5) / box.scale + np.asarray(box.center)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    @property
    def empty(self) -> bool:
        return not self.t_far > self.t_near

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def intersect_box(origins, dirs, lo=0.0, hi=1.0):
    """Slab test against [lo, hi]^3; returns (t_near, t_far), equal when missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # parallel to a slab: inside it -> unbounded, outside -> empty
    parallel = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    miss = ~(t_far > t_near)
    t_far = np.where(miss, t_near, t_far)
    return t_near, t_far


def generate_rays(intr: CameraIntrinsics, rotations, centers, box: SceneBox, u, v):
    """Batched rays in unit-cube coordinates.

    ``rotations`` (N, 3, 3) and ``centers`` (N, 3) are per-ray camera-to-world
    poses; ``u``, ``v`` integer pixel indices. Returns origins, directions,
    t_near, t_far.
    """
    cam_dirs = pixel_directions(intr)[v, u]  # (N, 3)
    dirs = np.einsum("nij,nj->ni", rotations, cam_dirs)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = world_to_unit(box, centers)
    t_near, t_far = intersect_box(origins, dirs, box.lo, box.hi)
    return origins, dirs, t_near, t_far


def pixel_to_ray(intr: CameraIntrinsics, pose: Pose, box: SceneBox, u: float, v: float) -> Ray:
    x, y = undistort_pixel(intr, u, v)
    d = pose.rotation @ np.array([x, y, 1.0])
    d /= np.linalg.norm(d)
    origin = world_to_unit(box, pose.translation)
    t_near, t_far = intersect_box(origin[None], d[None], box.lo, box.hi)
    return Ray(origin, d, float(t_near[0]), float(t_far[0]))
