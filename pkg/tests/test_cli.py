import csv
import json

import numpy as np
import pytest

from avatarfield.cli import knn_checksum, run_command, run_knn_bench
from avatarfield.knn import brute_force_knn
from avatarfield.pipeline import AvatarModel
from avatarfield.config import load_config
from avatarfield.flame import load_point_model
from avatarfield.ppm import read_ppm
from avatarfield.tensorio import load_checkpoint

from conftest import TINY


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_command(["synth-scene", "--out", str(root / "ds"), "--points", "48", "--low-res", "4",
                        "--samples", "256"]) == 0
    (root / "tiny.json").write_text(json.dumps({**TINY, "eval_every": 0}))
    return root


def fit(workspace, out, steps, *extra):
    return run_command(["fit", "--manifest", str(workspace / "ds" / "manifest.json"), "--out", str(out),
                        "--config", str(workspace / "tiny.json"), "--steps", str(steps), *extra])


def test_usage_errors_exit_one(capsys):
    assert run_command([]) == 1
    assert run_command(["fit", "--bogus"]) == 1
    assert run_command(["no-such-command"]) == 1
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero():
    assert run_command(["--help"]) == 0


def test_missing_checkpoint_exits_two(tmp_path, capsys):
    assert run_command(["render", "--ckpt", str(tmp_path / "missing.bin"), "--out", str(tmp_path / "x")]) == 2
    assert "missing.bin" in capsys.readouterr().err


def test_bad_config_exits_two(workspace, tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"knn_k": 0}')
    code = run_command(["fit", "--manifest", str(workspace / "ds" / "manifest.json"), "--out", str(tmp_path / "o"),
                        "--config", str(tmp_path / "bad.json")])
    assert code == 2 and "knn_k" in capsys.readouterr().err


def test_zero_step_fit_saves_initial_model(workspace, tmp_path):
    assert fit(workspace, tmp_path / "f0", 0, "--no-renders") == 0
    ckpt = load_checkpoint(tmp_path / "f0" / "checkpoint.gpav")
    cfg = load_config(tmp_path / "f0" / "config.json")
    init = AvatarModel(cfg, load_point_model(workspace / "ds" / "asset.bin"))
    for name, value in init.state_tensors().items():
        assert np.array_equal(ckpt[name], value)
    assert ckpt["adam.step"][0] == 0.0


def test_fit_render_eval_round_trip(workspace, tmp_path, capsys):
    out = tmp_path / "f"
    assert fit(workspace, out, 3) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] == 3 and "holdout_psnr" in summary
    for name in ("checkpoint.gpav", "metrics.csv", "config.json", "loss_curves.png", "holdout_comparison.png"):
        assert (out / name).exists()
    assert len(list((out / "renders").glob("*.ppm"))) == 9

    prefix = tmp_path / "view"
    assert run_command(["render", "--ckpt", str(out / "checkpoint.gpav"), "--out", str(prefix), "--azimuth", "15",
                        "--dump-features", str(tmp_path / "feat.gpav")]) == 0
    assert read_ppm(f"{prefix}_high.ppm").shape == (16, 16, 3)
    assert read_ppm(f"{prefix}_low.ppm").shape == (4, 4, 3)
    assert load_checkpoint(tmp_path / "feat.gpav")["feature_image"].shape == (4, 4, 32)
    assert run_command(["render", "--ckpt", str(out / "checkpoint.gpav"), "--out", str(prefix),
                        "--expr", "1,2"]) == 2

    capsys.readouterr()
    assert run_command(["eval", "--ckpt", str(out / "checkpoint.gpav"), "--manifest",
                        str(workspace / "ds" / "manifest.json"), "--figure", str(tmp_path / "cmp.png")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["count"] == 9
    assert {"psnr", "ssim", "l1", "rec", "l1_lr", "l1_hr", "perc_lr", "perc_hr"} <= set(report)
    assert (tmp_path / "cmp.png").stat().st_size > 0


def test_gradcheck_single_module(capsys):
    assert run_command(["gradcheck", "--module", "triplane", "--module", "losses"]) == 0
    out = capsys.readouterr().out
    assert "PASS triplane" in out and "PASS losses" in out


def test_gradcheck_unknown_module_exits_two():
    assert run_command(["gradcheck", "--module", "nope"]) == 2


def test_knn_bench_csv_and_figure(tmp_path):
    assert run_command(["knn-bench", "--points", "100,200", "--k", "4", "--queries", "500",
                        "--out", str(tmp_path / "b.csv"), "--figure", str(tmp_path / "b.png")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert [r["P"] for r in rows] == ["100", "200"]
    assert list(rows[0]) == ["P", "K", "build_ms", "queries_per_sec", "checksum"]
    assert (tmp_path / "b.png").stat().st_size > 0


def test_bench_checksum_agrees_with_oracle():
    row = run_knn_bench([300], [8], 1000, "grid", seed=5)[0]
    rng = np.random.default_rng([5, 0xBE, 300])
    cloud = rng.uniform(-0.5, 0.5, size=(300, 3))
    queries = rng.uniform(-0.5, 0.5, size=(1000, 3))
    assert row["checksum"] == knn_checksum(brute_force_knn(cloud, queries, 8).indices)
    assert run_knn_bench([300], [8], 1000, "brute", seed=5)[0]["checksum"] == row["checksum"]


def test_threads_flag_validated(tmp_path):
    assert run_command(["--threads", "0", "knn-bench", "--points", "10", "--k", "1", "--queries", "5"]) == 2
    assert run_command(["--threads", "1", "knn-bench", "--points", "10", "--k", "1", "--queries", "5",
                        "--out", str(tmp_path / "o.csv")]) == 0
