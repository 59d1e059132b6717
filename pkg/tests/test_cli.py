import json
import subprocess
import sys

import numpy as np
import pytest

from silsdf import cli
from silsdf.fields import save_checkpoint
from silsdf.mesh import read_ply
from silsdf.netpbm import read_rgb

from conftest import tiny_net


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.run(["synth", "--scene", "sphere", "--views", "3", "--res", "16", "--out", str(root / "data")]) == 0
    save_checkpoint(tiny_net(), root / "tiny.bin")
    (root / "cfg.json").write_text(
        json.dumps(
            {
                "batch_views": 2,
                "pixels_per_view": 16,
                "eikonal_samples": 8,
                "iterations": 3,
                "checkpoint_every": 0,
                "weights": {"rgb": 0.5},
            }
        )
    )
    return root


class TestCommands:
    def test_synth_then_check_bound(self, workspace, capsys):
        assert cli.run(["check-bound", "--data", str(workspace / "data"), "--depths", "10"]) == 0
        assert capsys.readouterr().out.startswith("0 violations")

    def test_pretrain(self, tmp_path, capsys):
        code = cli.run(
            ["pretrain", "--iters", "3", "--points", "100", "--width", "16", "--enc-levels", "2", "--out", str(tmp_path / "p.bin")]
        )
        assert code == 0
        assert (tmp_path / "p.bin").exists()
        assert "final mse" in capsys.readouterr().out

    def test_fit_extract_render_eval(self, workspace, tmp_path):
        ckpt, log = tmp_path / "fit.bin", tmp_path / "log.csv"
        args = ["--data", str(workspace / "data"), "--config", str(workspace / "cfg.json"), "--init", str(workspace / "tiny.bin")]
        assert cli.run(["fit", *args, "--out", str(ckpt), "--log", str(log), "--iters", "2"]) == 0
        assert len(log.read_text().splitlines()) == 3

        mesh = tmp_path / "m.ply"
        assert cli.run(["extract", "--ckpt", str(ckpt), "--res", "12", "--out", str(mesh)]) == 0
        read_ply(mesh)

        img = tmp_path / "r.ppm"
        assert cli.run(["render", "--ckpt", str(ckpt), "--camera", str(workspace / "data" / "camera_000.json"), "--out", str(img)]) == 0
        assert read_rgb(img).shape == (16, 16, 3)

    def test_eval_report(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        a = rng.random((50, 3))
        np.savetxt(tmp_path / "a.xyz", a)
        np.savetxt(tmp_path / "b.xyz", a + [0.01, 0, 0])
        code = cli.run(["eval", "--pred", str(tmp_path / "a.xyz"), "--gt", str(tmp_path / "b.xyz"), "--icp", "--report", str(tmp_path / "r.json")])
        assert code == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["accuracy"] < 1e-6 and "icp" in report
        assert json.loads(capsys.readouterr().out) == report

    def test_deterministic_log(self, workspace, tmp_path):
        logs = []
        for k in range(2):
            log = tmp_path / f"log{k}.csv"
            args = ["--deterministic", "fit", "--data", str(workspace / "data"), "--config", str(workspace / "cfg.json")]
            assert cli.run([*args, "--init", str(workspace / "tiny.bin"), "--out", str(tmp_path / f"c{k}.bin"), "--log", str(log), "--seed", "3"]) == 0
            logs.append(log.read_bytes())
        assert logs[0] == logs[1]


class TestErrors:
    def test_no_subcommand(self):
        assert cli.run([]) == cli.EXIT_USAGE

    def test_unknown_scene(self, tmp_path):
        assert cli.run(["synth", "--scene", "teapot", "--out", str(tmp_path)]) == cli.EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert cli.run(["extract", "--ckpt", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "m.ply")]) == cli.EXIT_MISSING
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and "not found" in err

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"garbage!" * 4)
        assert cli.run(["extract", "--ckpt", str(tmp_path / "bad.bin"), "--out", str(tmp_path / "m.ply")]) == cli.EXIT_SCHEMA

    def test_bad_config(self, workspace, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"no_such_key": 1}))
        args = ["fit", "--data", str(workspace / "data"), "--config", str(tmp_path / "cfg.json")]
        assert cli.run([*args, "--init", str(workspace / "tiny.bin"), "--out", str(tmp_path / "c.bin")]) == cli.EXIT_SCHEMA

    def test_bound_violation_exit_code(self, workspace, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        for f in (workspace / "data").iterdir():
            (data / f.name).write_bytes(f.read_bytes())
        manifest = json.loads((data / "manifest.json").read_text())
        manifest["scene"]["radius"] = 0.48
        (data / "manifest.json").write_text(json.dumps(manifest))
        assert cli.run(["check-bound", "--data", str(data), "--depths", "10"]) == cli.EXIT_CHECK_FAILED

    def test_console_script(self, tmp_path):
        out = subprocess.run(
            [sys.executable, "-m", "silsdf.cli", "check-bound", "--data", str(tmp_path / "missing")],
            capture_output=True,
            text=True,
        )
        assert out.returncode == cli.EXIT_MISSING
        assert "dataset directory not found" in out.stderr
