"""End-to-end run: replay server, stream client, online trainer, extraction.

The three workers run concurrently (server and client on threads, trainer
on the calling thread). Extraction starts as soon as the trainer returns.
The timed span runs from the first training step to the end of extraction;
held-out evaluation and file output happen afterwards and are not timed.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, SceneBox
from .client import FrameBuffer, FrameStager, StreamReport, run_stream
from .extract import BenchRow, bench_csv, extract_points, write_ply
from .field import (
    FieldConfig,
    RadianceField,
    TrainConfig,
    Trainer,
    is_holdout,
    render_image,
    run_online_training,
    training_frames,
)
from .metrics import format_db, psnr
from .server import EmulatorServer, ReplayPlan, load_recording

log = logging.getLogger(__name__)

# replay rate used when fps is None (offline row); the wire field is a u8
_UNLIMITED_FPS = 10_000


class PipelineError(RuntimeError):
    """A stage failed; ``report`` holds whatever was measured before that."""

    def __init__(self, message: str, report: "RunReport"):
        super().__init__(message)
        self.report = report


@dataclass
class RunConfig:
    recording: str | None = None  # replayed in-process when set
    endpoint: str | None = None  # "host:port" of an external server instead
    fps: float | None = 30  # None: stream as fast as possible, then train offline_steps
    batch_n: int | None = None  # frames per publication; default one second of frames
    capacity: int = 400
    box_center: tuple = (0.0, 0.0, 0.0)
    box_scale: float = 1.0
    field: dict = field(default_factory=dict)  # FieldConfig overrides
    batch_rays: int = 1024
    n_samples: int = 64
    lr_grid: float = 1e-2
    lr_net: float = 1e-3
    holdout_every: int = 10
    steps_per_batch: int | None = None  # set for the deterministic lockstep mode
    max_steps: int | None = None
    offline_steps: int = 2000
    targets: tuple = (50_000,)
    extract_samples: int = 128
    eval_samples: int = 128
    seed: int = 0
    device_poses: bool = False
    connect_timeout: float = 10.0
    output_dir: str | None = None

    def __post_init__(self):
        if self.fps is not None and self.fps <= 0:
            raise ValueError("fps must be positive (or None for unlimited)")
        if self.recording is None and self.endpoint is None:
            raise ValueError("need a recording path or an endpoint")
        self.box_center = tuple(float(c) for c in self.box_center)
        self.targets = tuple(int(t) for t in self.targets)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        d = json.loads(Path(path).read_text())
        if d.get("recording") and not Path(d["recording"]).is_absolute():
            d["recording"] = str(Path(path).parent / d["recording"])
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box_center"] = list(self.box_center)
        d["targets"] = list(self.targets)
        return d

    @property
    def box(self) -> SceneBox:
        return SceneBox(self.box_center, self.box_scale)

    @property
    def publication_size(self) -> int:
        if self.batch_n is not None:
            return self.batch_n
        return max(1, round(self.fps)) if self.fps is not None else 30


@dataclass
class RunReport:
    fps: float | None
    train_seconds: float = 0.0
    reconstruction_seconds: float = 0.0
    psnr_db: float = float("nan")
    targets: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    extraction_seconds: list = field(default_factory=list)
    steps: int = 0
    steps_before_end: int = 0
    final_loss: float = float("nan")
    received: int = 0
    buffered: int = 0
    rejected: int = 0
    heldout_frames: int = 0
    max_frame_sampled: int = -1
    first_pool: int = 0
    partial: bool = False
    error: str | None = None
    outputs: dict = field(default_factory=dict)

    @property
    def accumulated_seconds(self) -> float:
        return self.train_seconds + self.reconstruction_seconds

    def as_dict(self) -> dict:
        d = asdict(self)
        d["accumulated_seconds"] = self.accumulated_seconds
        return d


def run_pipeline(cfg: RunConfig, recording=None, field_out: list | None = None) -> RunReport:
    """Run one configuration. ``recording`` may be passed in to skip loading.

    ``field_out``, if given, receives the trained field, the frame buffer and
    the intrinsics. A failing stage raises :class:`PipelineError` carrying the
    partial report.
    """
    report = RunReport(cfg.fps)
    server = None
    if cfg.endpoint is None:
        rec = recording if recording is not None else load_recording(cfg.recording)
        plan = ReplayPlan(cfg.fps if cfg.fps is not None else _UNLIMITED_FPS)
        server = EmulatorServer(rec, plan)
        host, port = server.host, server.port
        server_thread, server_result = server.serve_in_thread(accept_timeout=30)
    else:
        host, port_s = cfg.endpoint.rsplit(":", 1)
        port = int(port_s)

    ready = threading.Event()
    state: dict = {}

    def on_buffer(buffer, intr):
        state["buffer"], state["intr"] = buffer, intr
        ready.set()

    def client():
        try:
            state["stream"], _ = run_stream(
                host, port, cfg.publication_size, fps=min(255, max(1, round(cfg.fps or 255))),
                device_poses=cfg.device_poses, on_buffer=on_buffer, capacity=cfg.capacity,
                connect_timeout=cfg.connect_timeout,
            )
        except Exception as exc:
            state["client_error"] = exc
        finally:
            ready.set()

    client_thread = threading.Thread(target=client, name="stream-client", daemon=True)
    client_thread.start()
    try:
        ready.wait()
        if "buffer" not in state:
            err = state.get("client_error")
            raise RuntimeError(f"stream client failed: {type(err).__name__}: {err}")
        buffer, intr = state["buffer"], state["intr"]
        rf = RadianceField(FieldConfig(**cfg.field), seed=cfg.seed)
        trainer = Trainer(rf, intr, cfg.box, TrainConfig(
            batch_rays=cfg.batch_rays, n_samples=cfg.n_samples, lr_grid=cfg.lr_grid,
            lr_net=cfg.lr_net, seed=cfg.seed, holdout_every=cfg.holdout_every,
        ))

        if cfg.fps is None:
            buffer.end_of_stream.wait()
            t0 = time.perf_counter()
            for _ in range(cfg.offline_steps):
                trainer.step(buffer)
            report.train_seconds = time.perf_counter() - t0
            report.steps = cfg.offline_steps
            report.first_pool = buffer.published_count
        else:
            tr = run_online_training(trainer, buffer, steps_per_batch=cfg.steps_per_batch,
                                     max_steps=cfg.max_steps, timeout=60)
            report.train_seconds = tr.wall_time
            report.steps = tr.steps
            report.steps_before_end = tr.steps_before_end
            report.first_pool = tr.first_pool
            report.max_frame_sampled = tr.max_frame_sampled
        t_extract = time.perf_counter()
        frames = training_frames(buffer.published_count, cfg.holdout_every)
        clouds = []
        for target in cfg.targets:
            t1 = time.perf_counter()
            cloud, ext = extract_points(rf, buffer, cfg.box, intr, target, seed=cfg.seed,
                                        n_samples=cfg.extract_samples, frames=frames)
            report.extraction_seconds.append(time.perf_counter() - t1)
            report.targets.append(target)
            report.hits.append(ext.hit_points)
            clouds.append(cloud)
        report.reconstruction_seconds = time.perf_counter() - t_extract

        if trainer.history:
            report.final_loss = trainer.history[-1].loss
        client_thread.join()
        stream = state.get("stream")
        if stream is not None:
            report.received, report.buffered, report.rejected = stream.received, stream.buffered, stream.rejected
            if stream.error:
                report.partial, report.error = True, stream.error
        held = np.flatnonzero(is_holdout(np.arange(buffer.published_count), cfg.holdout_every))
        report.heldout_frames = int(held.size)
        if held.size:
            report.psnr_db = heldout_psnr(rf, buffer, intr, cfg.box, held, cfg.eval_samples)
        if cfg.output_dir:
            _write_outputs(cfg, report, rf, clouds)
        if field_out is not None:
            field_out.extend([rf, buffer, intr])
    except Exception as exc:
        report.partial = True
        report.error = f"{type(exc).__name__}: {exc}"
        raise PipelineError(report.error, report) from exc
    finally:
        if server is not None:
            server_thread.join(timeout=5)
            server.close()
    return report


def heldout_psnr(rf, buffer, intr, box, frames, n_samples: int = 128) -> float:
    """Mean PSNR over the given buffer frames, rendered from their poses."""
    vals = [psnr(render_image(rf, intr, buffer.pose(int(k)), box, n_samples), buffer.rgba[int(k)])
            for k in frames]
    return float(np.mean(vals))


def _write_outputs(cfg, report, rf, clouds):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for target, cloud in zip(report.targets, clouds):
        if len(cloud):
            path = out / f"points_{target}.ply"
            write_ply(cloud, path)
            report.outputs[f"ply_{target}"] = str(path)
    rows = [BenchRow(t, h, s) for t, h, s in zip(report.targets, report.hits, report.extraction_seconds)]
    (out / "extraction.csv").write_text(bench_csv(rows))
    rf.save(out / "field.npz")
    (out / "report.txt").write_text(format_table([report]))
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2))
    report.outputs.update(csv=str(out / "extraction.csv"), checkpoint=str(out / "field.npz"),
                          report=str(out / "report.txt"))


def format_table(reports) -> str:
    """Plain-text table with one row per run: fps, Train, 3DR, ACC, PSNR, steps, hits."""
    head = f"{'fps':>8} {'Train[s]':>9} {'3DR[s]':>8} {'ACC[s]':>9} {'PSNR[dB]':>9} {'steps':>7} {'hits':>10}"
    lines = [head]
    for r in reports:
        fps = "-" if r.fps is None else f"{r.fps:g}"
        hits = "/".join(str(h) for h in r.hits) or "-"
        lines.append(
            f"{fps:>8} {r.train_seconds:9.2f} {r.reconstruction_seconds:8.3f} {r.accumulated_seconds:9.2f} "
            f"{format_db(r.psnr_db):>9} {r.steps:>7} {hits:>10}"
        )
    return "\n".join(lines) + "\n"


def fps_sweep(cfg: RunConfig, fps_values=(2, 5, 15, 30), recording=None) -> list[RunReport]:
    """Same recording and seed at several replay rates; one report per rate."""
    rec = recording if recording is not None or cfg.recording is None else load_recording(cfg.recording)
    reports = []
    for fps in fps_values:
        d = cfg.to_dict()
        d["fps"] = fps
        d["output_dir"] = None if cfg.output_dir is None else str(Path(cfg.output_dir) / f"fps_{fps}")
        reports.append(run_pipeline(RunConfig.from_dict(d), recording=rec))
        log.info("fps %s done: %s", fps, format_db(reports[-1].psnr_db))
    return reports


def buffer_from_recording(rec, capacity: int = 400, device_poses: bool = False):
    """Decode a recording straight into a frame buffer, without the network."""
    buffer = FrameBuffer(rec.width, rec.height, capacity)
    report = StreamReport(intrinsics=CameraIntrinsics.from_response(rec.intrinsics))
    stager = FrameStager(buffer, max(1, len(rec)), report, device_poses)
    for e in rec.entities:
        stager.add(e)
    stager.flush()
    buffer.finish()
    return buffer, report
