"""End-to-end command-line workflows and exit-code contracts."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rigsplat import cli
from rigsplat import sceneio as sio
from rigsplat.errors import NumericalError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds_root = root / "dataset"
    assert cli.main(["synth", str(ds_root), "--seed", "5", "--frames", "4",
                     "--size", "24", "--vertices", "12"]) == 0
    manifest = str(ds_root / "manifest.json")
    checkpoint = str(root / "avatar.ckpt")
    log = str(root / "train.csv")
    assert cli.main(["train", manifest, checkpoint, "--desk",
                     "--iterations", "4", "--seed", "1",
                     "--sh-degree", "1", "--log", log]) == 0
    return {"root": root, "manifest": manifest, "checkpoint": checkpoint,
            "log": log}


class TestUsageErrors:
    def test_no_command_is_usage_error(self):
        assert cli.main([]) == 1

    def test_unknown_command_is_usage_error(self):
        assert cli.main(["discombobulate"]) == 1

    def test_missing_required_option_is_usage_error(self, workspace):
        assert cli.main(["render", workspace["checkpoint"],
                         workspace["manifest"]]) == 1

    def test_help_exits_zero(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "selftest" in capsys.readouterr().out


class TestDataErrors:
    def test_missing_manifest(self, workspace, tmp_path):
        code = cli.main(["init", str(tmp_path / "nope.json"),
                         str(tmp_path / "out.ckpt")])
        assert code == 2

    def test_missing_checkpoint(self, workspace, tmp_path):
        code = cli.main(["render", str(tmp_path / "nope.ckpt"),
                         workspace["manifest"], "--frame", "0",
                         "--out", str(tmp_path / "o.png")])
        assert code == 2

    def test_out_of_range_frame_exits_2_with_message(self, workspace,
                                                     tmp_path, capsys):
        code = cli.main(["render", workspace["checkpoint"],
                         workspace["manifest"], "--frame", "999",
                         "--out", str(tmp_path / "o.png")])
        assert code == 2
        err = capsys.readouterr().err
        assert "999" in err and "range" in err

    def test_unknown_config_field(self, workspace, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"bogus_knob": 1}))
        code = cli.main(["train", workspace["manifest"],
                         str(tmp_path / "x.ckpt"), "--config", str(cfg)])
        assert code == 2

    def test_config_not_json(self, workspace, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("not json at all {")
        code = cli.main(["train", workspace["manifest"],
                         str(tmp_path / "x.ckpt"), "--config", str(cfg)])
        assert code == 2

    def test_reenact_wrong_condition_dim(self, workspace, tmp_path):
        stream = tmp_path / "stream.json"
        stream.write_text(json.dumps({"conditions": [[0.0, 1.0]]}))
        code = cli.main(["reenact", workspace["checkpoint"],
                         workspace["manifest"], str(stream),
                         "--out-dir", str(tmp_path / "re")])
        assert code == 2


class TestNumericalErrors:
    def test_numerical_failure_maps_to_exit_3(self, workspace, monkeypatch):
        def boom(*args, **kwargs):
            raise NumericalError("synthetic failure")

        monkeypatch.setattr(cli.tr, "train", boom)
        code = cli.main(["train", workspace["manifest"],
                         workspace["checkpoint"] + ".tmp"])
        assert code == 3


class TestWorkflows:
    def test_init_writes_loadable_checkpoint(self, workspace, tmp_path):
        ck = str(tmp_path / "fresh.ckpt")
        assert cli.main(["init", workspace["manifest"], ck,
                         "--sh-degree", "1"]) == 0
        loaded = sio.load_checkpoint(ck)
        assert loaded.iteration == 0
        assert len(loaded.cloud) > 0

    def test_train_writes_log(self, workspace):
        rows = sio.read_log(workspace["log"])
        assert len(rows) == 4
        assert rows[-1]["iteration"] == 4

    def test_train_resume_extends(self, workspace, tmp_path):
        ck = str(tmp_path / "resume.ckpt")
        assert cli.main(["train", workspace["manifest"], ck, "--desk",
                         "--iterations", "2", "--seed", "3"]) == 0
        assert cli.main(["train", workspace["manifest"], ck, "--resume",
                         "--iterations", "5"]) == 0
        loaded = sio.load_checkpoint(ck)
        assert loaded.iteration == 5

    def test_render_writes_image_and_alpha(self, workspace, tmp_path):
        out = str(tmp_path / "f1.png")
        alpha = str(tmp_path / "f1_a.png")
        assert cli.main(["render", workspace["checkpoint"],
                         workspace["manifest"], "--frame", "1",
                         "--out", out, "--alpha", alpha]) == 0
        img = sio.read_image(out)
        assert img.shape == (24, 24, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert os.path.exists(alpha)

    def test_render_with_condition_stream(self, workspace, tmp_path):
        ds = sio.load_manifest(workspace["manifest"])
        stream = tmp_path / "stream.json"
        stream.write_text(json.dumps(
            {"conditions": [ds.frames[2].condition.tolist()]}))
        out = str(tmp_path / "swap.png")
        assert cli.main(["render", workspace["checkpoint"],
                         workspace["manifest"], "--frame", "0",
                         "--out", out, "--conditions", str(stream)]) == 0
        assert os.path.exists(out)

    def test_novel_view_zero_offsets_matches_render_bitwise(
            self, workspace, tmp_path):
        a = str(tmp_path / "plain.png")
        b = str(tmp_path / "orbit0.png")
        assert cli.main(["render", workspace["checkpoint"],
                         workspace["manifest"], "--frame", "1",
                         "--out", a]) == 0
        assert cli.main(["novel-view", workspace["checkpoint"],
                         workspace["manifest"], "--frame", "1",
                         "--azimuth", "0", "--elevation", "0",
                         "--out", b]) == 0
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()

    def test_novel_view_nonzero_offset_changes_image(self, workspace,
                                                     tmp_path):
        a = str(tmp_path / "plain.png")
        b = str(tmp_path / "orbit.png")
        assert cli.main(["render", workspace["checkpoint"],
                         workspace["manifest"], "--frame", "1",
                         "--out", a]) == 0
        assert cli.main(["novel-view", workspace["checkpoint"],
                         workspace["manifest"], "--frame", "1",
                         "--azimuth", "25", "--out", b]) == 0
        assert not np.array_equal(sio.read_image(a), sio.read_image(b))

    def test_reenact_writes_sequence(self, workspace, tmp_path):
        ds = sio.load_manifest(workspace["manifest"])
        stream = tmp_path / "stream.json"
        stream.write_text(json.dumps({"conditions": [
            ds.frames[3].condition.tolist(),
            ds.frames[2].condition.tolist(),
        ]}))
        out_dir = tmp_path / "re"
        assert cli.main(["reenact", workspace["checkpoint"],
                         workspace["manifest"], str(stream),
                         "--out-dir", str(out_dir)]) == 0
        assert sorted(os.listdir(out_dir)) == ["reenact_0000.png",
                                               "reenact_0001.png"]

    def test_eval_json_table(self, workspace, capsys):
        assert cli.main(["eval", workspace["checkpoint"],
                         workspace["manifest"], "--split", "held",
                         "--json"]) == 0
        table = json.loads(capsys.readouterr().out)
        assert "mean_psnr" in table and "mean_ssim" in table
        assert len(table["psnr"]) == 1  # 4 frames, every 4th held out

    def test_eval_text_table(self, workspace, capsys):
        assert cli.main(["eval", workspace["checkpoint"],
                         workspace["manifest"], "--split", "all"]) == 0
        out = capsys.readouterr().out
        assert "psnr" in out and "mean" in out


class TestSelftest:
    def test_selftest_subset_green_in_subprocess(self):
        proc = subprocess.run(
            [sys.executable, "-m", "rigsplat.cli", "selftest", "--fast",
             "--keyword", "icosahedron_counts"],
            capture_output=True, text=True, timeout=300,
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr
