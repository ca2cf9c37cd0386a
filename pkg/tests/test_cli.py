"""Configuration parsing, CLI subcommands, exit codes, reproducibility."""

import filecmp
import os

import pytest

from detfuse.cli import main
from detfuse.config import RunConfig
from detfuse.errors import DataError
from detfuse import pipeline

SMALL_CFG = """\
classes = cat, dog, car
detectors = alpha, beta
seed = 13
workspace = {ws}
images.train = 12
images.val = 12
images.test = 16
scene.mean_objects = 2.5
detector.alpha.skill = 0.75
detector.beta.skill = 0.55
detector.beta.skill.car = 0.9
detector.alpha.fp_rate = 0.8
detector.beta.fp_rate = 1.0
proposals.OBJ.count = 20
proposals.CORE.count = 20
proposals.EES.count = 20
learner.loss = logistic
similarity.pets = cat, dog
"""


def write_cfg(tmp_path, ws="ws", name="run.cfg", text=SMALL_CFG):
    path = tmp_path / name
    path.write_text(text.format(ws=ws))
    return str(path)


class TestConfig:
    def test_load_and_defaults(self, tmp_path):
        cfg = RunConfig.load(write_cfg(tmp_path))
        assert cfg.rosters.classes == ("cat", "dog", "car")
        assert cfg.seed == 13
        assert cfg.profiles["beta"].skill == (0.55, 0.55, 0.9)
        assert cfg.nms.coverage_threshold == 0.4
        assert cfg.feature_options.n_neighbors == 10
        assert cfg.similarity == {"cat": "pets", "dog": "pets"}
        assert cfg.workspace == str(tmp_path / "ws")

    def test_overrides(self, tmp_path):
        cfg = RunConfig.load(write_cfg(tmp_path), ["seed=99", "nms.coverage_threshold=0.6"])
        assert cfg.seed == 99
        assert cfg.nms.coverage_threshold == 0.6

    def test_unknown_key_rejected(self, tmp_path):
        path = write_cfg(tmp_path, text=SMALL_CFG + "mystery.knob = 1\n")
        with pytest.raises(DataError, match="unknown configuration key"):
            RunConfig.load(path)

    def test_missing_required_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("classes = a\n")
        with pytest.raises(DataError):
            RunConfig.load(str(path))

    def test_bad_values(self, tmp_path):
        with pytest.raises(DataError, match="integer"):
            RunConfig.load(write_cfg(tmp_path), ["seed=banana"])
        with pytest.raises(DataError, match="unknown learner.loss"):
            RunConfig.load(write_cfg(tmp_path), ["learner.loss=banana"])
        with pytest.raises(DataError, match="boolean"):
            RunConfig.load(write_cfg(tmp_path), ["features.kernel_map=banana"])

    def test_config_hash_tracks_content(self, tmp_path):
        c1 = RunConfig.load(write_cfg(tmp_path))
        c2 = RunConfig.load(write_cfg(tmp_path), ["seed=14"])
        assert c1.config_hash != c2.config_hash


def run_steps(cfg_path, steps):
    for step in steps:
        code = main(step.split() + ["--config", cfg_path])
        assert code == 0, f"step {step!r} failed"


BASE_STEPS = ["simulate", "calibrate", "train", "rerank --mode learned", "rerank --mode naive-i"]


class TestCliWorkflow:
    def test_exit_codes(self, tmp_path, capsys):
        assert main(["definitely-not-a-subcommand"]) == 1
        assert main(["rerank", "--config", "nope.cfg"]) == 1  # --mode missing
        cfg = write_cfg(tmp_path)
        assert main(["rerank", "--config", "/does/not/exist.cfg", "--mode", "naive-i"]) == 2
        # eval without prior artifacts -> data error
        assert main(["eval", "--config", cfg, "--mode", "learned"]) == 2
        capsys.readouterr()

    def test_full_workflow_and_reports(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        run_steps(cfg_path, BASE_STEPS)
        run_steps(cfg_path, ["eval --mode learned", "eval --mode naive-i", "analyze --mode learned", "bound"])
        out = capsys.readouterr().out
        assert "mAP all-points" in out
        assert "maximal mAP [test] combined" in out
        ws = tmp_path / "ws"
        for rel in (
            "data/split.manifest",
            "calibration.tsv",
            "models/logistic/cat.model",
            "ranked/learned-logistic.tsv",
            "reports/eval-learned-logistic.csv",
            "reports/fp-taxonomy-learned-logistic.csv",
            "reports/feature-importance.csv",
            "manifests/simulate.manifest",
        ):
            assert (ws / rel).exists(), rel

    def test_cli_matches_in_process_call(self, tmp_path, capsys):
        # same code path: the subprocess-style entry and the library call
        # must produce byte-identical artifacts
        cfg_a = write_cfg(tmp_path, ws="ws_a", name="a.cfg")
        cfg_b = write_cfg(tmp_path, ws="ws_b", name="b.cfg")
        run_steps(cfg_a, ["simulate", "calibrate"])
        assert main(["rerank", "--config", cfg_a, "--mode", "naive-i"]) == 0
        cfg = RunConfig.load(cfg_b)
        pipeline.run_simulate(cfg)
        pipeline.run_calibrate(cfg)
        path_b = pipeline.run_rerank(cfg, "naive-i")
        capsys.readouterr()
        path_a = str(tmp_path / "ws_a" / "ranked" / "naive-i.tsv")
        assert filecmp.cmp(path_a, path_b, shallow=False)

    def test_cross_fold_violation_exits_2(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        run_steps(cfg_path, ["simulate"])
        manifest = tmp_path / "ws" / "data" / "split.manifest"
        manifest.write_text(manifest.read_text().replace("dets-train.tsv @ val", "dets-train.tsv @ train"))
        assert main(["calibrate", "--config", cfg_path]) == 2
        err = capsys.readouterr().err
        assert "cross-fold violation" in err

    def test_eval_perfect_detector_prints_map_one(self, tmp_path, capsys):
        text = SMALL_CFG.replace("detector.alpha.skill = 0.75", "detector.alpha.skill = 1.0")
        overrides = [
            "detector.alpha.fp_rate=0", "detector.beta.fp_rate=0",
            "detector.beta.skill=1.0", "detector.alpha.loc_sigma=0",
            "detector.beta.loc_sigma=0", "scene.difficult_fraction=0",
        ]
        cfg_path = write_cfg(tmp_path, text=text)
        args = sum ((["--set", o] for o in overrides), [])
        assert main(["simulate", "--config", cfg_path] + args) == 0
        assert main(["calibrate", "--config", cfg_path] + args) == 0
        assert main(["rerank", "--config", cfg_path, "--mode", "naive-i"] + args) == 0
        assert main(["eval", "--config", cfg_path, "--mode", "naive-i"] + args) == 0
        out = capsys.readouterr().out
        assert "mAP all-points = 1.000000" in out

    def test_rerun_is_byte_identical(self, tmp_path, capsys):
        import shutil

        cfg = write_cfg(tmp_path)
        steps = BASE_STEPS + ["eval --mode learned"]
        run_steps(cfg, steps)
        root = tmp_path / "ws"
        snapshot = tmp_path / "ws_snapshot"
        shutil.copytree(root, snapshot)
        shutil.rmtree(root)
        run_steps(cfg, steps)
        capsys.readouterr()
        mismatches = []
        for dirpath, _, filenames in os.walk(snapshot):
            for fn in filenames:
                a = os.path.join(dirpath, fn)
                b = os.path.join(str(root), os.path.relpath(a, snapshot))
                if not (os.path.exists(b) and filecmp.cmp(a, b, shallow=False)):
                    mismatches.append(os.path.relpath(a, snapshot))
        assert not mismatches
