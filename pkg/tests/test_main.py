"""Command-line dispatch, exit codes and the gen-synth / render / metrics round trip."""
import logging
import os

import pandas as pd
import pytest
import torch
from torch.testing import assert_close

from formats import read_ppm
from main import main

GEN_ARGS = ["--views", "1", "--frames", "2", "--height", "8", "--width", "8", "--static", "60", "--dynamic", "1"]


@pytest.fixture(autouse=True)
def restore_torch_state():
    threads = torch.get_num_threads()
    yield
    torch.use_deterministic_algorithms(False)
    torch.set_num_threads(threads)


@pytest.fixture
def scene_dir(tmp_path) -> str:
    directory = str(tmp_path / "scene")
    assert main(["--threads", "1", "gen-synth", "--out", directory, "--seed", "4"] + GEN_ARGS) == 0
    return directory


class TestConfig:
    def test_print_config(self, capsys):
        assert main(["--print-config"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert any(line.startswith("euler_steps=") for line in lines)
        assert any(line.startswith("dy_values=") for line in lines)

    def test_config_file_then_flags(self, tmp_path, capsys):
        path = tmp_path / "run.env"
        path.write_text("EULER_STEPS=3\nSEED=9\n", encoding="utf-8")
        assert main(["--config", str(path), "--print-config", "infer", "--seed", "11"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert "euler_steps=3" in lines
        assert "seed=11" in lines

    def test_no_command_is_a_usage_error(self):
        assert main([]) == 2

    def test_non_finite_offset(self, capsys):
        assert main(["infer", "--dy", "0,nan"]) == 1
        assert "kind=config" in capsys.readouterr().err


class TestCommands:
    def test_gen_synth_writes_a_scene(self, scene_dir):
        assert os.path.exists(os.path.join(scene_dir, "manifest.json"))
        assert os.path.exists(os.path.join(scene_dir, "gaussians", "t001.gs4d"))

    def test_gen_synth_count(self, tmp_path, capsys):
        parent = str(tmp_path / "many")
        assert main(["--threads", "2", "gen-synth", "--out", parent, "--count", "2"] + GEN_ARGS) == 0
        assert sorted(os.listdir(parent)) == ["scene_0000", "scene_0001"]
        assert len(capsys.readouterr().out.splitlines()) == 2

    def test_render_zero_offset_reproduces_the_scene(self, scene_dir, tmp_path):
        out = str(tmp_path / "render")
        assert main(["--threads", "1", "render", "--scene", scene_dir, "--dy", "0", "--out", out]) == 0
        for name in ("v0_t000.ppm", "v0_t001.ppm"):
            rendered = read_ppm(os.path.join(out, "rgb", name))
            stored = read_ppm(os.path.join(scene_dir, "rgb", name))
            assert_close(rendered, stored, atol=1.0 / 255.0 + 1e-6, rtol=0)

    def test_metrics_against_itself(self, scene_dir, tmp_path, capsys):
        csv = str(tmp_path / "metrics.csv")
        assert main(["metrics", "--pred", scene_dir, "--truth", scene_dir, "--csv", csv]) == 0
        frame = pd.read_csv(csv)
        assert frame["name"].tolist() == ["v0_t000", "v0_t001"]
        assert "psnr" in capsys.readouterr().out

    def test_infer_with_missing_checkpoint(self, scene_dir, tmp_path, capsys):
        missing = str(tmp_path / "nowhere.rflw")
        code = main(["infer", "--scene", scene_dir, "--flow", missing, "--out", str(tmp_path / "out")])
        assert code == 1
        err = capsys.readouterr().err
        assert "kind=missing-checkpoint" in err
        assert missing in err

    def test_reconstruct_without_a_scene(self, tmp_path, capsys):
        assert main(["reconstruct", "--scene", str(tmp_path / "empty"), "--out", str(tmp_path / "out")]) == 1
        assert "kind=format" in capsys.readouterr().err

    def test_log_file(self, tmp_path):
        log_path = str(tmp_path / "run.log")
        root = logging.getLogger()
        before = list(root.handlers)
        try:
            args = ["--log-file", log_path, "--threads", "1", "gen-synth", "--out", str(tmp_path / "s")] + GEN_ARGS
            assert main(args) == 0
        finally:
            for handler in root.handlers[len(before):]:
                handler.close()
                root.removeHandler(handler)
        with open(log_path, "r", encoding="utf-8") as handle:
            assert "Wrote scene 0" in handle.read()
