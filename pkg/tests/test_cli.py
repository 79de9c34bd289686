import json

import numpy as np
import pytest

from sglkf import cli, io_formats
from sglkf.io_formats import ResultRow


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(d), "--n-scenarios", "3", "--set", "synth.n_frames=24",
                     "--set", "synth.n_objects=6"]) == 0
    return d


def _manifest(d):
    return json.loads((d / "run_manifest.json").read_text())


def test_synth_outputs(data_dir):
    dirs = io_formats.read_manifest(data_dir / "manifest.txt")
    assert len(dirs) == 3
    b = io_formats.read_bundle(dirs[0])
    assert b.n_frames == 24 and b.box_dim == 4
    man = _manifest(data_dir)
    assert man["command"] == "synth" and man["config"]["synth.n_frames"] == 24
    assert man["config_sources"]["synth.n_frames"] == "flag"
    assert man["config_sources"]["synth.n_scenarios"] == "flag"


def test_full_pipeline(data_dir, tmp_path, capsys):
    train_out, track_out, eval_out = tmp_path / "train", tmp_path / "track", tmp_path / "eval"
    code, _ = run(["train", "--manifest", data_dir / "manifest.txt", "--out", train_out, "--epochs", 2,
                   "--total-epochs", 4, "--set", "train.warmup_epochs=1"], capsys)
    assert code == 0
    for name in ("msnet.ckpt", "metrics.jsonl", "curve.json", "loss_weights.json", "run_manifest.json"):
        assert (train_out / name).exists()
    assert len((train_out / "metrics.jsonl").read_text().splitlines()) == 2
    code, _ = run(["track", "--data", data_dir, "--checkpoint", train_out / "msnet.ckpt", "--out", track_out], capsys)
    assert code == 0 and len(list(track_out.glob("*.txt"))) == 3
    code, out = run(["eval", "--data", data_dir, "--results", track_out, "--out", eval_out], capsys)
    assert code == 0 and "HOTA" in out.out
    rep = json.loads((eval_out / "report.json").read_text())
    assert 0.0 < rep["HOTA"] <= 100.0
    assert (eval_out / "buckets.csv").read_text().startswith("speed,frames,matches")
    code, out = run(["speed-analysis", "--data", data_dir, "--results", track_out, "--out", tmp_path / "sa",
                     "--buckets", "0,60"], capsys)
    assert code == 0 and (tmp_path / "sa" / "speed_buckets.csv").exists()


def test_track_jobs_matches_serial(data_dir, tmp_path):
    assert cli.main(["track", "--data", str(data_dir), "--fixed-kf", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["track", "--data", str(data_dir), "--fixed-kf", "--jobs", "2", "--out", str(tmp_path / "b")]) == 0
    for p in sorted((tmp_path / "a").glob("*.txt")):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    assert _manifest(tmp_path / "a")["outputs"] == [
        o.replace(str(tmp_path / "b"), str(tmp_path / "a")) for o in _manifest(tmp_path / "b")["outputs"]]


def test_eval_perfect_results_score_100(data_dir, tmp_path, capsys):
    res = tmp_path / "res"
    res.mkdir()
    for d in io_formats.read_manifest(data_dir / "manifest.txt"):
        b = io_formats.read_bundle(d)
        rows = [ResultRow(t, g.track_id, g.cls, g.box, 1.0) for t, objs in b.gt.items() for g in objs if not g.ignore]
        io_formats.write_results(rows, res / f"{b.sequence_id}.txt")
    code, _ = run(["eval", "--data", data_dir, "--results", res, "--out", tmp_path / "ev", "--jobs", 2], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["HOTA"] == pytest.approx(100.0) and rep["MOTA"] == pytest.approx(100.0) and rep["IDSW"] == 0


def test_perturb_speed(data_dir, tmp_path):
    out = tmp_path / "p"
    assert cli.main(["perturb-speed", "--data", str(data_dir), "--sigma", "0.2", "--seed", "4", "--out", str(out)]) == 0
    src = sorted(io_formats.read_manifest(data_dir / "manifest.txt"))
    dst = io_formats.read_manifest(out / "manifest.txt")
    a, b = io_formats.read_bundle(src[0]), io_formats.read_bundle(dst[0])
    assert b.speed_source == "perturbed" and b.extras["perturbation"]["sigma"] == 0.2
    expect = io_formats.perturb_speed(a.speeds, "relative", 0.2, seed=4 * 100003)
    np.testing.assert_allclose(b.speeds, expect, rtol=0, atol=1e-9)


def test_env_override_reported(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("SPEEDTRACK_TRACKER_BASE_AGE", "7")
    assert cli.main(["track", "--data", str(data_dir), "--fixed-kf", "--out", str(tmp_path)]) == 0
    man = _manifest(tmp_path)
    assert man["config"]["tracker.base_age"] == 7 and man["config_sources"]["tracker.base_age"] == "env"


def test_config_file_layer(data_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("tracker.base_age = 5\n")
    assert cli.main(["track", "--data", str(data_dir), "--fixed-kf", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert _manifest(tmp_path / "o")["config_sources"]["tracker.base_age"] == "file"


def test_usage_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["track", "--data", "x", "--out", "y"]) == 2
    assert cli.main(["synth"]) == 2
    assert cli.main(["frobnicate", "--out", "y"]) == 2
    capsys.readouterr()


@pytest.mark.parametrize("argv", [
    ["track", "--data", "/nonexistent", "--fixed-kf"],
    ["synth", "--set", "synth.bogus=1"],
    ["synth", "--set", "synth.n_frames=abc"],
    ["synth", "--set", "noequals"],
])
def test_runtime_errors_exit_1_with_json_line(argv, tmp_path, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    msg = json.loads(err[0])
    assert set(msg) == {"error", "exit", "message"} and msg["exit"] == 1


def test_missing_results_exit_1(data_dir, tmp_path, capsys):
    assert cli.main(["eval", "--data", str(data_dir), "--results", str(tmp_path), "--out", str(tmp_path)]) == 1
    assert "no results" in json.loads(capsys.readouterr().err)["message"]


def test_help_shows_defaults(capsys):
    assert cli.main(["perturb-speed", "--help"]) == 0
    out = " ".join(capsys.readouterr().out.split())
    assert "default: 0.2" in out and "default: relative" in out


def test_synth_3d(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--n-scenarios", "1", "--box-dim", "6",
                     "--set", "synth.n_frames=8"]) == 0
    b = io_formats.read_bundle(io_formats.read_manifest(tmp_path / "manifest.txt")[0])
    assert b.box_dim == 6 and b.state_dim == 12


def test_version_string():
    assert cli.describe_version().startswith("0.1.0")
