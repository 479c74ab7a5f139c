"""Command line entry point: ``streamnerf <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .camera import CameraIntrinsics
from .extract import bench_csv, benchmark_extraction, extract_points, write_ply
from .field import RadianceField, training_frames
from .pipeline import PipelineError, RunConfig, buffer_from_recording, format_table, fps_sweep, run_pipeline
from .server import EmulatorServer, ReplayPlan, load_recording, save_recording
from .synthetic import SyntheticParams, generate_synthetic_scene, spread_indices


def _cmd_record_synthetic(args) -> int:
    invalid = spread_indices(args.views, args.invalid, args.seed) if args.invalid else ()
    params = SyntheticParams(n_views=args.views, width=args.width, height=args.height,
                             fps=args.fps, invalid=invalid)
    scene = generate_synthetic_scene(params)
    out = Path(args.out)
    save_recording(scene.recording, out)
    cfg = {
        "recording": out.name,
        "box_center": list(scene.box.center),
        "box_scale": scene.box.scale,
    }
    cfg_path = out.with_suffix(".json")
    cfg_path.write_text(json.dumps(cfg, indent=2) + "\n")
    print(f"wrote {len(scene.recording)} entities to {out} ({len(invalid)} invalid poses)")
    print(f"wrote run config {cfg_path}")
    return 0


def _cmd_serve(args) -> int:
    rec = load_recording(args.recording)
    plan = ReplayPlan(args.fps, args.start, args.stop)
    with EmulatorServer(rec, plan, args.host, args.port) as srv:
        print(f"serving {len(plan.indices(len(rec)))} entities at {float(plan.fps):g} fps on "
              f"{srv.host}:{srv.port}", flush=True)
        while True:
            summary = srv.serve_once()
            print(f"session: sent {summary.frames_sent}, stopped by client: {summary.stopped_by_client}"
                  + (f", error: {summary.error}" if summary.error else ""), flush=True)
            if not args.forever:
                return 0 if summary.error is None else 1


def _load_config(args) -> RunConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.config and d.get("recording") and not Path(d["recording"]).is_absolute():
        d["recording"] = str(Path(args.config).parent / d["recording"])
    for key in ("recording", "endpoint", "output_dir", "seed", "steps_per_batch", "batch_n"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "fps", None) is not None:
        d["fps"] = None if args.fps == "unlimited" else float(args.fps)
    if getattr(args, "targets", None):
        d["targets"] = args.targets
    return RunConfig.from_dict(d)


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    try:
        if args.sweep:
            fps_values = [None if f == "unlimited" else float(f) for f in args.sweep.split(",")]
            reports = fps_sweep(cfg, fps_values)
        else:
            reports = [run_pipeline(cfg)]
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(format_table([exc.report]), end="")
        return 1
    table = format_table(reports)
    print(table, end="")
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.output_dir) / "summary.txt").write_text(table)
    return 1 if any(r.partial for r in reports) else 0


def _offline_inputs(args):
    cfg = _load_config(args)
    rec = load_recording(cfg.recording)
    buffer, _ = buffer_from_recording(rec, cfg.capacity, cfg.device_poses)
    intr = CameraIntrinsics.from_response(rec.intrinsics)
    rf = RadianceField.load(args.checkpoint)
    return cfg, rf, buffer, intr


def _cmd_extract(args) -> int:
    cfg, rf, buffer, intr = _offline_inputs(args)
    frames = training_frames(buffer.published_count, cfg.holdout_every)
    cloud, report = extract_points(rf, buffer, cfg.box, intr, args.target, seed=cfg.seed,
                                   n_samples=cfg.extract_samples, frames=frames)
    print(f"{report.hit_points} hits of {report.target_rays} rays in {report.wall_time:.3f} s")
    if len(cloud):
        write_ply(cloud, args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_bench(args) -> int:
    cfg, rf, buffer, intr = _offline_inputs(args)
    frames = training_frames(buffer.published_count, cfg.holdout_every)
    rows = benchmark_extraction(rf, buffer, cfg.box, intr, args.targets, seed=cfg.seed,
                                n_samples=cfg.extract_samples, frames=frames)
    text = bench_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamnerf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("record-synthetic", help="render the synthetic cylinder scene to a recording")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=400)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--fps", type=float, default=30)
    s.add_argument("--invalid", type=int, default=0, help="number of frames given invalid poses")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_record_synthetic)

    s = sub.add_parser("serve", help="replay a recording over TCP")
    s.add_argument("recording")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=5005)
    s.add_argument("--fps", type=float, default=30)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--stop", type=int, default=None)
    s.add_argument("--forever", action="store_true", help="keep accepting sessions")
    s.set_defaults(func=_cmd_serve)

    def run_args(s):
        s.add_argument("--config", help="JSON file with RunConfig keys")
        s.add_argument("--recording")
        s.add_argument("--seed", type=int)

    s = sub.add_parser("run", help="stream, train online, extract")
    run_args(s)
    s.add_argument("--endpoint", help="host:port of a running server instead of in-process replay")
    s.add_argument("--fps", help="replay rate or 'unlimited'")
    s.add_argument("--batch-n", dest="batch_n", type=int)
    s.add_argument("--steps-per-batch", dest="steps_per_batch", type=int,
                   help="deterministic lockstep mode")
    s.add_argument("--targets", type=int, nargs="+")
    s.add_argument("--output-dir", dest="output_dir")
    s.add_argument("--sweep", help="comma-separated fps list, e.g. 2,5,15,30")
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("extract", help="extract a point cloud from a saved field")
    run_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--target", type=int, default=50_000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_extract)

    s = sub.add_parser("bench", help="time extraction over several ray counts")
    run_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--targets", type=int, nargs="+", default=[50_000, 500_000])
    s.add_argument("--csv")
    s.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
