"""End-to-end tests for the command-line interface.

A module-scoped workspace runs the whole pipeline once at reduced scale
(coarse calibration, a small exploration dataset, short trainings) and the
tests then exercise command behavior, exit codes, caching, and determinism
against those artifacts.
"""

import os
import shutil
import subprocess
import sys

import pytest

from twinbelt import cli

PIPELINE_INI = """\
[calibration]
n_transitions = 60

[estimator]
n_boxes = 12
epochs = 3

[baseline]
random_transitions = 200
controller_episodes = 1
epochs = 3

[roster]
repetitions = 1
random_batch = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Artifacts for every command, built through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "cfg.ini"
    ini.write_text(PIPELINE_INI)
    art = root / "art"
    for command in ("calibrate", "gen-data", "train-estimator",
                    "train-baseline"):
        rc = cli.main([command, "--config", str(ini), "--out", str(art)])
        assert rc == 0, command
    return str(ini), str(art)


class TestParsing:

    def test_console_script_exists(self):
        exe = shutil.which("twinbelt")
        assert exe is not None
        out = subprocess.run([exe, "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for command in ("calibrate", "gen-data", "train-estimator",
                        "train-baseline", "run-episode", "bench"):
            assert command in out.stdout

    def test_module_runs_as_script(self):
        out = subprocess.run([sys.executable, "-m", "twinbelt.cli",
                              "bench", "--help"],
                             capture_output=True, text=True)
        assert out.returncode == 0
        assert "--workers" in out.stdout

    def test_unknown_method_is_a_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["run-episode", "--method", "warp"])
        assert excinfo.value.code == 2

    def test_unknown_distribution_is_a_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["run-episode", "--method", "physics",
                      "--distribution", "Z"])
        assert excinfo.value.code == 2

    def test_missing_config_file(self, tmp_path, capsys):
        rc = cli.main(["calibrate", "--config", str(tmp_path / "absent.ini"),
                       "--out", str(tmp_path)])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, capsys):
        ini = tmp_path / "bad.ini"
        ini.write_text("[roster]\nbogus = 1\n")
        rc = cli.main(["calibrate", "--config", str(ini),
                       "--out", str(tmp_path)])
        assert rc == 1
        assert "unknown key" in capsys.readouterr().err


class TestCalibrate:

    def test_reports_all_channels(self, workspace, capsys):
        ini, art = workspace
        rc = cli.main(["calibrate", "--config", ini, "--out", art])
        assert rc == 0
        out = capsys.readouterr().out
        for channel in ("v1", "v2", "p1", "p2"):
            assert channel in out
        assert "populated bins" in out

    def test_same_seed_writes_identical_bytes(self, workspace, tmp_path):
        ini, art = workspace
        first = open(os.path.join(art, "force_map.csv"), "rb").read()
        rc = cli.main(["calibrate", "--config", ini, "--out", str(tmp_path)])
        assert rc == 0
        second = open(tmp_path / "force_map.csv", "rb").read()
        assert first == second

    def test_unpopulated_channel_fails_naming_it(self, tmp_path, capsys):
        ini = tmp_path / "tiny.ini"
        ini.write_text("[calibration]\nn_transitions = 3\n")
        rc = cli.main(["calibrate", "--config", ini.as_posix(),
                       "--out", str(tmp_path)])
        assert rc == 1
        assert "p1" in capsys.readouterr().err

    def test_embeds_config_hash_and_seed(self, workspace):
        _, art = workspace
        head = open(os.path.join(art, "force_map.csv")).read(400)
        assert "config_hash=" in head and "seed=3" in head


class TestGenData:

    def test_reports_transitions_consumed(self, tmp_path, capsys):
        ini = tmp_path / "cfg.ini"
        ini.write_text("[estimator]\nn_boxes = 2\n")
        rc = cli.main(["gen-data", "--config", str(ini),
                       "--out", str(tmp_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "2 boxes explored, 90 transitions consumed" in out
        assert (tmp_path / "estimator_dataset.bin").exists()
        assert (tmp_path / "estimator_dataset.bin.meta.json").exists()


class TestTrainEstimator:

    def test_reuses_cached_dataset(self, workspace, capsys):
        ini, art = workspace
        rc = cli.main(["train-estimator", "--config", ini, "--out", art])
        assert rc == 0
        out = capsys.readouterr().out
        assert "reusing cached dataset" in out
        assert '"val_median_iou"' in out

    def test_regenerates_when_config_changes(self, workspace, tmp_path,
                                             capsys):
        ini, art = workspace
        art2 = tmp_path / "art"
        shutil.copytree(art, art2)
        changed = tmp_path / "changed.ini"
        changed.write_text(PIPELINE_INI.replace(
            "n_boxes = 12", "n_boxes = 12\nslab_mix = 0.5", 1))
        rc = cli.main(["train-estimator", "--config", str(changed),
                       "--out", str(art2)])
        assert rc == 0
        assert "regenerating" in capsys.readouterr().out

    def test_generates_when_no_cache(self, tmp_path, capsys):
        ini = tmp_path / "cfg.ini"
        ini.write_text("[estimator]\nn_boxes = 12\nepochs = 2\n")
        rc = cli.main(["train-estimator", "--config", str(ini),
                       "--out", str(tmp_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "no cached dataset" in out
        assert (tmp_path / "estimator_model.bin").exists()


class TestTrainBaseline:

    def test_missing_force_map_named(self, tmp_path, capsys):
        rc = cli.main(["train-baseline", "--out", str(tmp_path)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "force map" in err and "calibrate" in err

    def test_missing_estimator_named(self, tmp_path, capsys):
        ini = tmp_path / "cfg.ini"
        ini.write_text("[calibration]\nn_transitions = 60\n")
        assert cli.main(["calibrate", "--config", str(ini),
                         "--out", str(tmp_path)]) == 0
        capsys.readouterr()
        rc = cli.main(["train-baseline", "--config", str(ini),
                       "--out", str(tmp_path)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "estimator model" in err and "train-estimator" in err

    def test_artifacts_written(self, workspace):
        _, art = workspace
        assert os.path.exists(os.path.join(art, "baseline_model.bin"))
        assert os.path.exists(os.path.join(art, "baseline_model.bin.meta.json"))
        assert os.path.exists(os.path.join(art, "baseline_transitions.bin"))


class TestRunEpisode:

    def test_physics_trace_is_seed_deterministic(self, workspace, tmp_path,
                                                 capsys):
        ini, art = workspace
        args = ["run-episode", "--config", ini, "--out", str(tmp_path),
                "--method", "physics", "--distribution", "uniform",
                "--seed", "5"]
        # artifacts live in the workspace dir, outputs go to tmp_path
        shutil.copy(os.path.join(art, "force_map.csv"), tmp_path)
        shutil.copy(os.path.join(art, "estimator_model.bin"), tmp_path)
        assert cli.main(args) == 0
        trace = tmp_path / "episode_physics_uniform.csv"
        first = trace.read_bytes()
        assert cli.main(args) == 0
        assert trace.read_bytes() == first
        out = capsys.readouterr().out
        assert "steps" in out
        head = trace.read_text()[:400]
        assert "config_hash=" in head and "seed=5" in head
        assert "method=physics" in head

    def test_blackbox_episode_runs(self, workspace, capsys):
        ini, art = workspace
        rc = cli.main(["run-episode", "--config", ini, "--out", art,
                       "--method", "blackbox", "--distribution", "uniform",
                       "--seed", "5"])
        assert rc == 0
        assert os.path.exists(os.path.join(art,
                                           "episode_blackbox_uniform.csv"))

    def test_missing_model_for_method(self, tmp_path, capsys):
        rc = cli.main(["run-episode", "--out", str(tmp_path),
                       "--method", "blackbox"])
        assert rc == 1
        assert "black-box model" in capsys.readouterr().err


class TestBench:

    def test_missing_baseline_model_named(self, workspace, tmp_path, capsys):
        ini, art = workspace
        shutil.copy(os.path.join(art, "force_map.csv"), tmp_path)
        shutil.copy(os.path.join(art, "estimator_model.bin"), tmp_path)
        rc = cli.main(["bench", "--config", ini, "--out", str(tmp_path)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "black-box model" in err and "train-baseline" in err

    def test_bench_outputs(self, workspace, capsys):
        ini, art = workspace
        rc = cli.main(["bench", "--config", ini, "--out", art,
                       "--workers", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "reference 83.33%" in out
        assert "distribution" in out and "success" in out
        episodes = open(os.path.join(art, "bench_episodes.csv")).readlines()
        data = [l for l in episodes if not l.startswith("#")]
        # header + 2 methods x 4 distributions x 1 rep + 1 random episode
        assert len(data) == 1 + 2 * 4 * 1 + 1
        summary = open(os.path.join(art, "bench_summary.csv")).readlines()
        sdata = [l for l in summary if not l.startswith("#")]
        assert len(sdata) == 1 + 2 * 4 + 1
        assert any(l.startswith("# config_hash=") for l in episodes)
        assert os.path.exists(os.path.join(art, "balance_band.csv"))
