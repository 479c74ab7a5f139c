"""Hash-grid radiance field, volume renderer and online trainer.

Gradients are written out by hand; the hash-grid lookup and the compositing
recurrence run in the kernels from :mod:`streamnerf._kernels`.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .camera import CameraIntrinsics, SceneBox, generate_rays

CHECKPOINT_MAGIC = "HLNF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    n_levels: int = 8
    base_resolution: int = 16
    growth: float = 1.45
    log2_table_size: int = 16
    n_features: int = 2
    hidden: int = 64
    geo_features: int = 15
    sh_degree: int = 4
    density_scale: float = 1.0
    density_bias: float = -1.0
    density_activation: str = "exp"  # or "softplus"; exp argument is capped at EXP_CLAMP

    def __post_init__(self):
        if self.density_activation not in ("softplus", "exp"):
            raise ValueError(f"unknown density activation {self.density_activation!r}")

    @property
    def table_size(self) -> int:
        return 2 ** self.log2_table_size

    @property
    def resolutions(self) -> np.ndarray:
        return np.array(
            [int(np.floor(self.base_resolution * self.growth ** lvl)) for lvl in range(self.n_levels)],
            dtype=np.int64,
        )

    @property
    def encoding_dim(self) -> int:
        return self.n_levels * self.n_features

    @property
    def dir_dim(self) -> int:
        return self.sh_degree ** 2


GRID_PARAMS = ("grid",)
NET_PARAMS = ("d_w1", "d_b1", "d_w2", "d_b2", "c_w1", "c_b1", "c_w2", "c_b2")


def sh_encode(d: np.ndarray, degree: int = 4) -> np.ndarray:
    """Real spherical harmonics up to ``degree`` bands (degree**2 values)."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = [np.full_like(x, 0.28209479177387814)]
    if degree > 1:
        out += [-0.48860251190291987 * y, 0.48860251190291987 * z, -0.48860251190291987 * x]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            1.0925484305920792 * x * y,
            -1.0925484305920792 * y * z,
            0.94617469575755997 * zz - 0.31539156525251999,
            -1.0925484305920792 * x * z,
            0.54627421529603959 * (xx - yy),
        ]
    if degree > 3:
        out += [
            0.59004358992664352 * y * (-3.0 * xx + yy),
            2.8906114426405538 * x * y * z,
            0.45704579946446572 * y * (1.0 - 5.0 * zz),
            0.3731763325901154 * z * (5.0 * zz - 3.0),
            0.45704579946446572 * x * (1.0 - 5.0 * zz),
            1.4453057213202769 * z * (xx - yy),
            0.59004358992664352 * x * (-xx + 3.0 * yy),
        ]
    if degree > 4:
        raise ValueError("sh_degree above 4 not supported")
    return np.stack(out, axis=-1).astype(d.dtype, copy=False)


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


EXP_CLAMP = 15.0


def _density_act(kind, x):
    """Activation and its derivative (the clamped exp passes exp's slope through)."""
    if kind == "exp":
        v = np.exp(np.minimum(x, EXP_CLAMP))
        return v, v
    return _softplus(x), _sigmoid(x)


def _sigmoid(x):
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


class RadianceField:
    """Maps unit-cube positions and view directions to density and color.

    Density depends on position only; color on position and direction.
    """

    def __init__(self, config: FieldConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or FieldConfig()
        self.dtype = np.dtype(dtype)
        self.resolutions = self.config.resolutions
        self.out_of_cube = 0
        rng = np.random.default_rng(seed)
        c = self.config
        in_c = c.geo_features + c.dir_dim

        def dense(n_in, n_out):
            bound = np.sqrt(6.0 / n_in)
            return rng.uniform(-bound, bound, (n_in, n_out))

        params = {
            "grid": rng.uniform(-1e-4, 1e-4, (c.n_levels, c.table_size, c.n_features)),
            "d_w1": dense(c.encoding_dim, c.hidden),
            "d_b1": np.zeros(c.hidden),
            "d_w2": dense(c.hidden, 1 + c.geo_features) * 0.5,
            "d_b2": np.zeros(1 + c.geo_features),
            "c_w1": dense(in_c, c.hidden),
            "c_b1": np.zeros(c.hidden),
            "c_w2": dense(c.hidden, 3) * 0.5,
            "c_b2": np.zeros(3),
        }
        params["d_b2"][0] = c.density_bias
        self.params = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in params.items()}

    # -- evaluation -------------------------------------------------------

    def _clamp(self, q):
        q = np.ascontiguousarray(q, dtype=self.dtype)
        outside = (q < 0) | (q > 1)
        if outside.any():
            self.out_of_cube += int(outside.any(axis=1).sum())
            q = np.clip(q, 0, 1)
        return q

    def density(self, q: np.ndarray) -> np.ndarray:
        """Density only; skips the color branch."""
        return self.density_and_features(q)[0]

    def density_and_features(self, q: np.ndarray):
        """Inference-only density branch: ``(sigma (N,), geometry features (N, G))``."""
        p = self.params
        enc, _, _ = _kernels.hash_encode(self._clamp(q), p["grid"], self.resolutions, False)
        a1 = np.maximum(enc @ p["d_w1"] + p["d_b1"], 0)
        out = a1 @ p["d_w2"] + p["d_b2"]
        sigma, _ = _density_act(self.config.density_activation, out[:, 0])
        return self.config.density_scale * sigma, out[:, 1:]

    def color(self, features: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Inference-only color branch on features from :meth:`density_and_features`."""
        p = self.params
        d = np.ascontiguousarray(d, dtype=self.dtype)
        x = np.concatenate([features, sh_encode(d, self.config.sh_degree)], axis=1)
        a2 = np.maximum(x @ p["c_w1"] + p["c_b1"], 0)
        return _sigmoid(a2 @ p["c_w2"] + p["c_b2"])

    def forward(self, q: np.ndarray, d: np.ndarray, need_grad: bool = False):
        """Returns ``(sigma (N,), rgb (N, 3), cache)``; cache is None unless need_grad."""
        p = self.params
        q = self._clamp(q)
        d = np.ascontiguousarray(d, dtype=self.dtype)
        enc, idx, w = _kernels.hash_encode(q, p["grid"], self.resolutions, need_grad)
        h1 = enc @ p["d_w1"] + p["d_b1"]
        a1 = np.maximum(h1, 0)
        out = a1 @ p["d_w2"] + p["d_b2"]
        raw = out[:, 0]
        act, dact = _density_act(self.config.density_activation, raw)
        sigma = self.config.density_scale * act
        sh = sh_encode(d, self.config.sh_degree)
        x = np.concatenate([out[:, 1:], sh], axis=1)
        h2 = x @ p["c_w1"] + p["c_b1"]
        a2 = np.maximum(h2, 0)
        rgb = _sigmoid(a2 @ p["c_w2"] + p["c_b2"])
        cache = None
        if need_grad:
            cache = dict(enc=enc, idx=idx, w=w, h1=h1, a1=a1, dact=dact, x=x, h2=h2, a2=a2, rgb=rgb)
        return sigma, rgb, cache

    def backward(self, grad_sigma, grad_rgb, cache) -> dict:
        p = self.params
        c = self.config
        grads = {}
        g_crgb = grad_rgb * cache["rgb"] * (1 - cache["rgb"])
        grads["c_w2"] = cache["a2"].T @ g_crgb
        grads["c_b2"] = g_crgb.sum(axis=0)
        g_h2 = (g_crgb @ p["c_w2"].T) * (cache["h2"] > 0)
        grads["c_w1"] = cache["x"].T @ g_h2
        grads["c_b1"] = g_h2.sum(axis=0)
        g_x = g_h2 @ p["c_w1"].T
        g_out = np.empty((g_x.shape[0], 1 + c.geo_features), dtype=self.dtype)
        g_out[:, 1:] = g_x[:, :c.geo_features]
        g_out[:, 0] = grad_sigma * c.density_scale * cache["dact"]
        grads["d_w2"] = cache["a1"].T @ g_out
        grads["d_b2"] = g_out.sum(axis=0)
        g_h1 = (g_out @ p["d_w2"].T) * (cache["h1"] > 0)
        grads["d_w1"] = cache["enc"].T @ g_h1
        grads["d_b1"] = g_h1.sum(axis=0)
        g_enc = np.ascontiguousarray(g_h1 @ p["d_w1"].T)
        grads["grid"] = _kernels.hash_encode_backward(g_enc, cache["idx"], cache["w"], p["grid"].shape)
        return grads

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "magic": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "dtype": self.dtype.str,
        }
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **self.params)

    @classmethod
    def load(cls, path) -> "RadianceField":
        with np.load(path) as data:
            meta = json.loads(data["__meta__"].tobytes().decode())
            if meta.get("magic") != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a radiance-field checkpoint")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            obj = cls(FieldConfig(**meta["config"]), dtype=np.dtype(meta["dtype"]))
            for k in obj.params:
                obj.params[k] = np.ascontiguousarray(data[k])
        return obj


def query_field(rf: RadianceField, q, d):
    """Single-point convenience wrapper: returns (sigma, rgb)."""
    sigma, rgb, _ = rf.forward(np.atleast_2d(q), np.atleast_2d(d))
    return float(sigma[0]), rgb[0]


# -- rendering ---------------------------------------------------------------


def stratified_samples(t_near, t_far, n_samples, rng=None, dtype=np.float64):
    """Sample depths, one per equal-width stratum.

    Bin midpoints without ``rng``, uniform jitter inside each bin with it.
    Each sample's spacing is the stratum width.
    """
    t_near = np.asarray(t_near, dtype=np.float64)
    width = (np.asarray(t_far, dtype=np.float64) - t_near) / n_samples
    offs = 0.5 if rng is None else rng.random((t_near.shape[0], n_samples))
    t = t_near[:, None] + (np.arange(n_samples)[None, :] + offs) * width[:, None]
    delta = np.broadcast_to(width[:, None], t.shape)
    return t.astype(dtype), np.ascontiguousarray(delta, dtype=dtype)


@dataclass
class RenderResult:
    color: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    weights: np.ndarray | None = None
    transmittance: np.ndarray | None = None
    cache: dict | None = None


def render_rays(rf: RadianceField, origins, dirs, t_near, t_far, n_samples=128, rng=None,
                need_grad=False) -> RenderResult:
    """Volume-render a batch of rays. Empty rays render black with zero opacity."""
    dt = rf.dtype
    n = origins.shape[0]
    color = np.zeros((n, 3), dtype=dt)
    opacity = np.zeros(n, dtype=dt)
    depth = np.zeros(n, dtype=dt)
    live = np.flatnonzero(np.asarray(t_far) > np.asarray(t_near))
    if live.size == 0:
        return RenderResult(color, opacity, depth, cache={"live": live} if need_grad else None)
    t, delta = stratified_samples(t_near[live], t_far[live], n_samples, rng, dt)
    o = np.asarray(origins, dtype=dt)[live]
    d = np.asarray(dirs, dtype=dt)[live]
    pts = o[:, None, :] + t[:, :, None] * d[:, None, :]
    dd = np.broadcast_to(d[:, None, :], pts.shape)
    sigma, rgb, fcache = rf.forward(pts.reshape(-1, 3), dd.reshape(-1, 3), need_grad)
    sigma = sigma.reshape(-1, n_samples)
    rgb = np.ascontiguousarray(rgb.reshape(-1, n_samples, 3))
    c, a, wts, trans = _kernels.composite(sigma, delta, rgb)
    color[live] = c
    opacity[live] = a
    depth[live] = (wts * t).sum(axis=1) / np.maximum(a, 1e-10)
    cache = None
    if need_grad:
        cache = dict(live=live, sigma=sigma, delta=delta, rgb=rgb, weights=wts, trans=trans,
                     field=fcache)
    return RenderResult(color, opacity, depth, wts, trans, cache)


def render_ray(rf: RadianceField, ray, n_samples=128):
    """Render a single :class:`~streamnerf.camera.Ray`; returns (rgb, depth, opacity)."""
    res = render_rays(rf, ray.origin[None], ray.direction[None], np.array([ray.t_near]),
                      np.array([ray.t_far]), n_samples)
    return res.color[0], float(res.depth[0]), float(res.opacity[0])


def backward_render(rf: RadianceField, result: RenderResult, grad_color, grad_opacity=None) -> dict:
    cache = result.cache
    live = cache["live"]
    if live.size == 0:
        return {k: np.zeros_like(v) for k, v in rf.params.items()}
    gc = np.ascontiguousarray(grad_color[live], dtype=rf.dtype)
    go = None if grad_opacity is None else np.ascontiguousarray(grad_opacity[live], dtype=rf.dtype)
    g_sigma, g_rgb = _kernels.composite_backward(
        gc, go, cache["sigma"], cache["delta"], cache["rgb"], cache["weights"], cache["trans"]
    )
    return rf.backward(g_sigma.reshape(-1), g_rgb.reshape(-1, 3), cache["field"])


def render_image(rf: RadianceField, intr: CameraIntrinsics, pose, box: SceneBox, n_samples=128,
                 chunk=4096) -> np.ndarray:
    """Render a full (H, W, 3) float image from one pose."""
    vv, uu = np.mgrid[0:intr.height, 0:intr.width]
    u, v = uu.ravel(), vv.ravel()
    n = u.size
    rot = np.broadcast_to(pose.rotation, (n, 3, 3))
    cen = np.broadcast_to(pose.translation, (n, 3))
    o, d, tn, tf = generate_rays(intr, rot, cen, box, u, v)
    out = np.empty((n, 3), dtype=np.float64)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        out[s:e] = render_rays(rf, o[s:e], d[s:e], tn[s:e], tf[s:e], n_samples).color
    return out.reshape(intr.height, intr.width, 3)


# -- optimization ------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a dict of arrays, per-key learning rates."""

    def __init__(self, params: dict, lr: dict, betas=(0.9, 0.99), eps=1e-15):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            step = (self.lr[k] / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[k] -= step.astype(params[k].dtype, copy=False)


@dataclass
class TrainConfig:
    batch_rays: int = 4096
    n_samples: int = 128
    lr_grid: float = 1e-2
    lr_net: float = 1e-3
    seed: int = 0
    holdout_every: int = 0  # 0 disables; otherwise frame index % k == 0 is held out


def is_holdout(index, holdout_every: int):
    index = np.asarray(index)
    if holdout_every <= 0:
        return np.zeros(index.shape, dtype=bool)
    return index % holdout_every == 0


def training_frames(count: int, holdout_every: int) -> np.ndarray:
    idx = np.arange(count)
    return idx[~is_holdout(idx, holdout_every)]


@dataclass
class StepLog:
    step: int
    pool: int
    max_frame: int
    loss: float


class Trainer:
    """Owns the field parameters and optimizer state for online training."""

    def __init__(self, rf: RadianceField, intr: CameraIntrinsics, box: SceneBox,
                 config: TrainConfig | None = None):
        self.field = rf
        self.intr = intr
        self.box = box
        self.config = config or TrainConfig()
        c = self.config
        lr = {k: (c.lr_grid if k in GRID_PARAMS else c.lr_net) for k in rf.params}
        self.optimizer = Adam(rf.params, lr)
        self.rng = np.random.default_rng(c.seed)
        self.steps = 0
        self.history: list[StepLog] = []

    def has_frames(self, pool: int) -> bool:
        return training_frames(pool, self.config.holdout_every).size > 0

    def sample_batch(self, buffer, pool: int | None = None):
        """Random (frame, pixel) rays over the first ``pool`` published frames."""
        count = buffer.published_count if pool is None else pool
        frames = training_frames(count, self.config.holdout_every)
        if frames.size == 0:
            raise ValueError("frame buffer has no published training frames")
        n = self.config.batch_rays
        f = frames[self.rng.integers(0, frames.size, n)]
        u = self.rng.integers(0, buffer.width, n)
        v = self.rng.integers(0, buffer.height, n)
        rot, cen = buffer.rotations[f], buffer.centers[f]
        o, d, tn, tf = generate_rays(self.intr, rot, cen, self.box, u, v)
        target = buffer.rgba[f, v, u, :3].astype(self.field.dtype) / 255
        return f, (o, d, tn, tf), target

    def loss_and_grads(self, rays, target, rng=None):
        o, d, tn, tf = rays
        res = render_rays(self.field, o, d, tn, tf, self.config.n_samples, rng=rng, need_grad=True)
        diff = res.color - target
        loss = float(np.mean(diff * diff))
        grad_color = (2.0 / diff.size) * diff
        grads = backward_render(self.field, res, grad_color)
        return loss, grads

    def step(self, buffer, pool: int | None = None) -> float:
        if pool is None:
            pool = buffer.published_count
        f, rays, target = self.sample_batch(buffer, pool)
        loss, grads = self.loss_and_grads(rays, target, rng=self.rng)
        self.optimizer.step(self.field.params, grads)
        self.steps += 1
        self.history.append(StepLog(self.steps, int(pool), int(f.max()), loss))
        return loss


def training_step(trainer: Trainer, buffer, batch: int | None = None) -> float:
    """One optimizer step on ``batch`` random rays from the published frames."""
    if buffer.published_count == 0:
        raise ValueError("frame buffer is empty")
    if batch is not None and batch != trainer.config.batch_rays:
        trainer.config.batch_rays = batch
    return trainer.step(buffer)


@dataclass
class TrainingReport:
    steps: int
    wall_time: float
    final_loss: float
    first_pool: int
    last_pool: int
    max_frame_sampled: int
    steps_before_end: int


def run_online_training(trainer: Trainer, buffer, stop_signal: threading.Event | None = None,
                        steps_per_batch: int | None = None, max_steps: int | None = None,
                        timeout: float | None = None) -> TrainingReport:
    """Train while frames stream in.

    Free-running mode (``steps_per_batch`` None): steps back to back, each one
    sampling from whatever is published at that moment, until the buffer
    reports end of stream (or ``stop_signal`` is set).

    Lockstep mode: exactly ``steps_per_batch`` steps per publication, each
    using that publication's prefix as the pool. Results are then independent
    of thread timing.
    """
    stop = stop_signal or buffer.end_of_stream
    if not buffer.training_started.wait(timeout):
        raise TimeoutError("training-start signal not received")
    t0 = time.perf_counter()
    start_steps = trainer.steps
    steps_before_end = 0
    first_pool = buffer.published_count
    if steps_per_batch is None:
        while not stop.is_set():
            if max_steps is not None and trainer.steps - start_steps >= max_steps:
                break
            pool = buffer.published_count
            if not trainer.has_frames(pool):
                # only held-out frames so far
                buffer.wait_for_publication(len(buffer.publications) + 1, timeout=0.05)
                continue
            trainer.step(buffer, pool)
            steps_before_end += 1
    else:
        done = 0
        while True:
            pubs = buffer.publications
            if done < len(pubs):
                pool = pubs[done]
                if done == 0:
                    first_pool = pool
                for _ in range(steps_per_batch if trainer.has_frames(pool) else 0):
                    trainer.step(buffer, pool)
                    if not buffer.end_of_stream.is_set():
                        steps_before_end += 1
                done += 1
                continue
            if buffer.end_of_stream.is_set() and done >= len(buffer.publications):
                break
            buffer.wait_for_publication(done + 1, timeout=0.05)
    wall = time.perf_counter() - t0
    hist = trainer.history[start_steps:] if start_steps < len(trainer.history) else []
    return TrainingReport(
        steps=trainer.steps - start_steps,
        wall_time=wall,
        final_loss=hist[-1].loss if hist else float("nan"),
        first_pool=int(first_pool),
        last_pool=hist[-1].pool if hist else int(first_pool),
        max_frame_sampled=max((h.max_frame for h in hist), default=-1),
        steps_before_end=steps_before_end,
    )
