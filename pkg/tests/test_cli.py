import json
import os
import subprocess
import sys

import numpy as np
import pytest

from panomtl.cli import main
from panomtl.io import read_pfm, read_ply


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--count", "3", "--height", "32", "--seed", "7"]) == 0
    args = ["train", "--quiet", "--set", f"data_dir={root / 'data'}", "--set", f"out_dir={root / 'run'}",
            "--set", "net.height=32", "--set", "net.width=64", "--set", "net.base_channels=4",
            "--set", "epochs=1", "--set", "batch_size=3"]
    assert main(args) == 0
    return root


def test_synth_writes_manifest(workspace):
    lines = (workspace / "data" / "manifest.txt").read_text().splitlines()
    assert lines[0] == "# 32 64" and len(lines) == 4


def test_train_prints_summary(workspace, capsys, tmp_path):
    main(["train", "--quiet", "--set", f"data_dir={workspace / 'data'}", "--set", f"out_dir={tmp_path}",
          "--set", "net.height=32", "--set", "net.width=64", "--set", "net.base_channels=4",
          "--set", "max_steps=1"])
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 1 and summary["stop"] == "max_steps"


def test_eval_writes_reports(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                 "--data", str(workspace / "data"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("mae ") and "normal_mean" in out
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert rep["delta_d1"] >= 0 and (tmp_path / "metrics.txt").exists()


def test_infer_exports_maps_and_clouds(workspace, tmp_path):
    rgb = workspace / "data" / "0000_rgb.png"
    assert main(["infer", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                 "--rgb", str(rgb), "--out", str(tmp_path)]) == 0
    assert read_pfm(tmp_path / "depth.pfm").shape == (32, 64)
    assert read_pfm(tmp_path / "normal.pfm").shape == (32, 64, 3)
    pts, col = read_ply(tmp_path / "cloud_rgb.ply")
    assert pts.shape == (32 * 64, 3) and col.shape == pts.shape


def test_export_ply_from_ground_truth(workspace, tmp_path):
    d = workspace / "data"
    assert main(["export-ply", "--depth", str(d / "0001_depth.pfm"), "--rgb", str(d / "0001_rgb.png"),
                 "--normal", str(d / "0001_normal.pfm"), "--out", str(tmp_path)]) == 0
    pts, _ = read_ply(tmp_path / "cloud_rgb.ply")
    depth = read_pfm(d / "0001_depth.pfm")
    np.testing.assert_allclose(np.sort(np.linalg.norm(pts, axis=1)), np.sort(depth.ravel()), rtol=1e-6)
    assert (tmp_path / "cloud_normal.ply").exists()


def test_gradcheck_op_scope_passes(capsys):
    assert main(["gradcheck", "--scope", "op"]) == 0
    assert "0 failure(s)" in capsys.readouterr().out


def test_gradcheck_reports_injected_bug(capsys):
    assert main(["gradcheck", "--scope", "op", "--inject-bug"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "1 failure(s)" in out


def test_errors_exit_with_code_two(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == 2
    assert main(["train", "--set", "lr=-1"]) == 2
    assert main(["train", "--set", "no_such_key=1"]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--set", "novalue"])


def test_console_module_invocation():
    res = subprocess.run([sys.executable, "-m", "panomtl.cli", "--help"], capture_output=True, text=True,
                         env=dict(os.environ))
    assert res.returncode == 0
    for cmd in ("synth", "train", "eval", "infer", "gradcheck", "export-ply"):
        assert cmd in res.stdout
