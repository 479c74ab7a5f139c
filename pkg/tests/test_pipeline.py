import json

import numpy as np
import pytest

from streamnerf.cli import main
from streamnerf.extract import read_ply
from streamnerf.pipeline import PipelineError, RunConfig, format_table, run_pipeline
from streamnerf.server import save_recording
from streamnerf.synthetic import SyntheticParams, generate_synthetic_scene


@pytest.fixture(scope="module")
def small_scene():
    return generate_synthetic_scene(SyntheticParams(n_views=20, width=16, height=16))


def quick_config(scene, **kw):
    base = dict(recording="unused", fps=200, batch_n=5, box_center=scene.box.center,
                box_scale=scene.box.scale, steps_per_batch=2, batch_rays=128, n_samples=16,
                eval_samples=16, extract_samples=32, targets=(500,), field={"log2_table_size": 12})
    base.update(kw)
    return RunConfig(**base)


def test_lockstep_run_report(small_scene, tmp_path):
    cfg = quick_config(small_scene, output_dir=str(tmp_path), targets=(300, 600))
    r = run_pipeline(cfg, recording=small_scene.recording)
    assert r.steps == 4 * 2
    assert (r.received, r.buffered, r.rejected) == (20, 20, 0)
    assert r.heldout_frames == 2
    assert np.isfinite(r.psnr_db)
    assert abs(r.accumulated_seconds - (r.train_seconds + r.reconstruction_seconds)) < 0.01
    assert r.reconstruction_seconds >= sum(r.extraction_seconds)
    assert all(h <= t for h, t in zip(r.hits, r.targets))
    assert (tmp_path / "extraction.csv").read_text().startswith("target,hits,seconds\n")
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["accumulated_seconds"] == pytest.approx(r.accumulated_seconds)
    if r.hits[0]:
        assert len(read_ply(tmp_path / "points_300.ply")) == r.hits[0]


def test_same_seed_same_outputs(small_scene, tmp_path):
    a = run_pipeline(quick_config(small_scene, output_dir=str(tmp_path / "a")), recording=small_scene.recording)
    b = run_pipeline(quick_config(small_scene, output_dir=str(tmp_path / "b")), recording=small_scene.recording)
    assert a.psnr_db == b.psnr_db and a.hits == b.hits
    pa, pb = tmp_path / "a" / "points_500.ply", tmp_path / "b" / "points_500.ply"
    assert pa.exists() == pb.exists()
    if pa.exists():
        assert pa.read_bytes() == pb.read_bytes()


def test_free_running_trains_until_end(small_scene):
    cfg = quick_config(small_scene, fps=40, steps_per_batch=None)
    r = run_pipeline(cfg, recording=small_scene.recording)
    assert r.steps >= 1 and r.steps_before_end == r.steps


def test_offline_mode(small_scene):
    cfg = quick_config(small_scene, fps=None, offline_steps=3)
    r = run_pipeline(cfg, recording=small_scene.recording)
    assert r.steps == 3 and r.first_pool == 20


def test_unreachable_endpoint_is_partial():
    cfg = RunConfig(endpoint="127.0.0.1:1", connect_timeout=0.2)
    with pytest.raises(PipelineError) as exc:
        run_pipeline(cfg)
    assert exc.value.report.partial


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        RunConfig()
    with pytest.raises(ValueError):
        RunConfig(recording="x", fps=0)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"recording": "x", "nonsense": 1})
    cfg = RunConfig(recording="r.hlns", fps=5)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    back = RunConfig.from_json(tmp_path / "c.json")
    assert back.recording == str(tmp_path / "r.hlns") and back.fps == 5
    assert cfg.publication_size == 5


def test_table_layout(small_scene):
    r = run_pipeline(quick_config(small_scene), recording=small_scene.recording)
    text = format_table([r, r])
    lines = text.splitlines()
    assert len(lines) == 3
    assert lines[0].split() == ["fps", "Train[s]", "3DR[s]", "ACC[s]", "PSNR[dB]", "steps", "hits"]


def test_cli_end_to_end(tmp_path, capsys):
    rec = tmp_path / "scene.hlns"
    assert main(["record-synthetic", "--out", str(rec), "--views", "12", "--width", "16", "--height", "16",
                 "--invalid", "2"]) == 0
    cfg = json.loads(rec.with_suffix(".json").read_text())
    cfg.update(batch_rays=64, n_samples=8, eval_samples=8, extract_samples=16, field={"log2_table_size": 10})
    (tmp_path / "scene.json").write_text(json.dumps(cfg))
    out = tmp_path / "run"
    assert main(["run", "--config", str(tmp_path / "scene.json"), "--fps", "100", "--batch-n", "4",
                 "--steps-per-batch", "1", "--targets", "200", "--output-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert "PSNR[dB]" in text
    assert (out / "field.npz").exists() and (out / "summary.txt").exists()
    assert main(["bench", "--config", str(tmp_path / "scene.json"), "--checkpoint", str(out / "field.npz"),
                 "--targets", "100", "200", "--csv", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "b.csv").read_text().count("\n") == 3
    code = main(["extract", "--config", str(tmp_path / "scene.json"), "--checkpoint", str(out / "field.npz"),
                 "--target", "100", "--out", str(tmp_path / "p.ply")])
    assert code == 0
    assert main(["run", "--recording", str(tmp_path / "missing.hlns")]) == 2


def test_saved_recording_runs_from_path(small_scene, tmp_path):
    save_recording(small_scene.recording, tmp_path / "s.hlns")
    cfg = quick_config(small_scene, recording=str(tmp_path / "s.hlns"))
    assert run_pipeline(cfg).buffered == 20
