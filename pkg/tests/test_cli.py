"""Command-line interface: end-to-end flow, exit codes, and determinism.

Commands run in-process through main(argv).  A module-scoped synthetic run
(synth -> extract -> propose -> register) provides the working directory;
oracles are the scene's exact ground truth and byte comparison of outputs.
"""

import os

import pytest

from planereg.cli import main
from planereg.config import load_config
from planereg.fileio import read_trajectory


def _snapshot(root):
    """Map of relative path -> file bytes for every file under root."""
    out = {}
    for base, _dirs, names in os.walk(root):
        for name in names:
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One full synth -> extract -> propose -> register run, shared read-only."""
    out = tmp_path_factory.mktemp("run")
    assert main(["synth", "--output-dir", str(out),
                 "--set", "scene.n_frames=3", "--set", "scene.seed=2"]) == 0
    conf = str(out / "synth.conf")
    for cmd in ("extract", "propose", "register"):
        assert main([cmd, "--config", conf]) == 0, cmd
    return out


class TestSynth:
    def test_writes_frames_and_metadata(self, workdir):
        for i in range(3):
            assert (workdir / "depth" / f"{i:06d}.png").exists()
            assert (workdir / "rgb" / f"{i:06d}.png").exists()
        assoc = (workdir / "association.txt").read_text().splitlines()
        assert len(assoc) == 3 and all(len(l.split()) == 4 for l in assoc)
        stamps, poses = read_trajectory(workdir / "groundtruth.txt")
        assert stamps == [0.0, 1.0, 2.0] and len(poses) == 3

    def test_keypoints_are_six_field_pixel_rows(self, workdir):
        rows = (workdir / "keypoints.txt").read_text().split()
        assert len(rows) % 6 == 0 and len(rows) > 0

    def test_emitted_config_is_runnable(self, workdir):
        config = load_config(workdir / "synth.conf")
        assert config.association_file == str(workdir / "association.txt")
        assert config.groundtruth_file == str(workdir / "groundtruth.txt")
        # camera block matches the rendered scene, not the TUM defaults
        assert config.fx == config.scene.fx
        h, w = config.scene.image_size
        assert config.cx == (w - 1) / 2.0


class TestFlowOutputs:
    def test_extract_writes_patch_table(self, workdir):
        lines = (workdir / "patches.csv").read_text().splitlines()
        assert lines[0].startswith("frame,patch,")
        assert len(lines) > 3  # at least one patch per frame

    def test_propose_writes_pair_table(self, workdir):
        lines = (workdir / "pairs.csv").read_text().splitlines()
        assert lines[0] == "frame_p,patch_p,frame_q,patch_q,d_f,weight,selection"
        assert len(lines) > 1

    def test_register_writes_trajectory_and_trace(self, workdir):
        stamps, poses = read_trajectory(workdir / "trajectory.txt")
        assert len(poses) == 3 and stamps == [0.0, 1.0, 2.0]
        assert (workdir / "trace.csv").exists()
        assert (workdir / "selected_pairs.csv").exists()


class TestEvaluate:
    def test_ate_of_registered_trajectory_is_small(self, workdir, capsys):
        assert main(["evaluate", "--config", str(workdir / "synth.conf")]) == 0
        line = [l for l in capsys.readouterr().out.splitlines()
                if l.startswith("ate_rmse_m")][-1]
        assert float(line.split()[1]) < 0.05
        assert (workdir / "ate.txt").read_text().strip() == line

    def test_ate_of_ground_truth_is_zero(self, workdir, capsys):
        code = main(["evaluate", "--config", str(workdir / "synth.conf"),
                     "--trajectory", str(workdir / "groundtruth.txt")])
        assert code == 0
        assert "ate_rmse_m 0.000000" in capsys.readouterr().out

    def test_pr_mode_with_oracle_descriptor(self, workdir, capsys):
        """Multi-size tiles fill all six area/distance subsets; oracle
        descriptors with zero noise separate them perfectly."""
        code = main(["evaluate", "--config", str(workdir / "synth.conf"),
                     "--mode", "pr", "--count", "120",
                     "--set", "run.descriptor=oracle",
                     "--set", "scene.tile_sizes=0.2,0.45,1.0",
                     "--set", "scene.room=3.0,2.4,5.0",
                     "--set", "scene.n_frames=4"])
        assert code == 0
        out = capsys.readouterr().out
        assert "pr_auc overall 1.0000" in out
        assert (workdir / "pr.csv").exists()
        assert (workdir / "pr_S1.csv").exists() and (workdir / "pr_D3.csv").exists()

    def test_pr_mode_rejects_color_descriptor(self, workdir, capsys):
        code = main(["evaluate", "--config", str(workdir / "synth.conf"),
                     "--mode", "pr", "--count", "120"])
        assert code == 1
        assert "descriptor" in capsys.readouterr().err

    def test_pr_count_must_balance_subsets(self, workdir, capsys):
        code = main(["evaluate", "--config", str(workdir / "synth.conf"),
                     "--mode", "pr", "--count", "100"])
        assert code == 1
        assert "divisible by 12" in capsys.readouterr().err


class TestRegisterModes:
    def test_coplanarity_only(self, workdir, tmp_path):
        code = main(["register", "--config", str(workdir / "synth.conf"),
                     "--coplanarity-only", "--output-dir", str(tmp_path)])
        assert code == 0
        _, poses = read_trajectory(tmp_path / "trajectory.txt")
        assert len(poses) == 3

    def test_keypoints_only(self, workdir, tmp_path):
        code = main(["register", "--config", str(workdir / "synth.conf"),
                     "--keypoints-only", "--output-dir", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "trajectory.txt").exists()

    def test_keypoints_only_requires_keypoint_file(self, workdir, tmp_path, capsys):
        code = main(["register", "--config", str(workdir / "synth.conf"),
                     "--keypoints-only", "--output-dir", str(tmp_path),
                     "--set", "paths.keypoint_file="])
        assert code == 2
        assert "keypoint" in capsys.readouterr().err


class TestExitCodes:
    def test_no_subcommand_is_usage_error(self):
        assert main([]) == 1

    def test_unknown_subcommand_is_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_unset_required_path_is_usage_error(self, capsys):
        assert main(["register"]) == 1
        assert "association_file must be set" in capsys.readouterr().err

    def test_missing_association_file_is_data_error(self, capsys):
        code = main(["extract", "--set", "paths.association_file=/nope/assoc.txt"])
        assert code == 2
        assert "association file not found" in capsys.readouterr().err

    def test_missing_depth_dir_is_data_error_naming_path(self, workdir, capsys):
        code = main(["extract", "--config", str(workdir / "synth.conf"),
                     "--set", "paths.depth_dir=/definitely/missing"])
        assert code == 2
        assert "depth directory not found: /definitely/missing" in capsys.readouterr().err

    def test_unknown_override_key_is_usage_error(self, capsys):
        assert main(["synth", "--set", "junk.key=1"]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_missing_trajectory_is_data_error(self, workdir, tmp_path, capsys):
        code = main(["evaluate", "--config", str(workdir / "synth.conf"),
                     "--output-dir", str(tmp_path)])
        assert code == 2
        assert "trajectory file not found" in capsys.readouterr().err


class TestDeterminism:
    def test_synth_reruns_byte_identical(self, tmp_path):
        args = ["synth", "--output-dir", str(tmp_path),
                "--set", "scene.n_frames=2", "--set", "scene.seed=5"]
        assert main(args) == 0
        first = _snapshot(tmp_path)
        assert main(args) == 0
        assert _snapshot(tmp_path) == first

    def test_register_reruns_byte_identical(self, workdir):
        names = ("trajectory.txt", "trace.csv", "selected_pairs.csv")
        first = {n: (workdir / n).read_bytes() for n in names}
        assert main(["register", "--config", str(workdir / "synth.conf")]) == 0
        assert {n: (workdir / n).read_bytes() for n in names} == first
