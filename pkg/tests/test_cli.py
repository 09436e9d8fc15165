import json
import subprocess
import sys

import numpy as np
import pytest

from liftseg.cli import main

SCENE_TOML = """
seed = 5
views = 6
resolution = 160
points_per_super_point = 30

[noise]
feature_dim = 4

[[parts]]
label = "ball"
shape = "sphere"
center = [-0.8, 0.0, 0.0]
size = [0.4]
points = 200

[[parts]]
label = "block"
shape = "box"
center = [0.8, 0.0, 0.0]
size = [0.6, 0.6, 0.6]
points = 200
"""


@pytest.fixture()
def bundle_dir(tmp_path):
    spec = tmp_path / "scene.toml"
    spec.write_text(SCENE_TOML)
    out = tmp_path / "bundle"
    assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 0
    return out


def run_cli(args):
    return subprocess.run(
        [sys.executable, "-m", "liftseg.cli", *args],
        capture_output=True, text=True,
    )


class TestBasics:
    def test_unknown_flag_exits_2(self):
        proc = run_cli(["lift", "--no-such-flag"])
        assert proc.returncode == 2
        assert "usage" in proc.stderr.lower()

    def test_missing_subcommand_exits_2(self):
        proc = run_cli([])
        assert proc.returncode == 2

    def test_runtime_error_exits_1(self, tmp_path):
        code = main(["visibility", "--cloud", str(tmp_path / "missing.txt"),
                     "--out", str(tmp_path / "v.txt")])
        assert code == 1

    def test_json_error_output(self, tmp_path):
        proc = run_cli(["visibility", "--json", "--cloud",
                        str(tmp_path / "missing.txt"),
                        "--out", str(tmp_path / "v.txt")])
        assert proc.returncode == 1
        err = json.loads(proc.stderr)
        assert "error" in err and err["error"]["type"]


class TestPipeline:
    def test_synth_lift_eval_sem(self, bundle_dir, tmp_path):
        labels_out = tmp_path / "labels.txt"
        scores_out = tmp_path / "scores.tsv"
        assert main([
            "lift",
            "--cloud", str(bundle_dir / "cloud.txt"),
            "--detections", str(bundle_dir / "detections.json"),
            "--out-labels", str(labels_out),
            "--out-scores", str(scores_out),
            "--res", "160",
        ]) == 0
        report_out = tmp_path / "sem.json"
        assert main([
            "eval-sem",
            "--cloud", str(bundle_dir / "cloud.txt"),
            "--pred", str(labels_out),
            "--out", str(report_out),
        ]) == 0
        report = json.loads(report_out.read_text())
        assert report["overall"] >= 0.99

    def test_visibility_file(self, bundle_dir, tmp_path):
        out = tmp_path / "vis.txt"
        assert main([
            "visibility", "--cloud", str(bundle_dir / "cloud.txt"),
            "--out", str(out), "--views", "6", "--res", "160",
        ]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("#liftseg-vis v1 K=6")

    def test_eval_inst_unweighted(self, bundle_dir, tmp_path):
        out = tmp_path / "inst.json"
        assert main([
            "eval-inst",
            "--cloud", str(bundle_dir / "cloud.txt"),
            "--detections", str(bundle_dir / "detections.json"),
            "--gt-instances", str(bundle_dir / "gt_instances.txt"),
            "--out", str(out), "--res", "160",
        ]) == 0
        doc = json.loads(out.read_text())
        assert doc["part_aware"]["mean_ap"] == 1.0
        assert doc["part_agnostic"]["mean_ap"] == 1.0

    def test_train_and_lift_weighted(self, tmp_path):
        spec = tmp_path / "scene.toml"
        objects = tmp_path / "objects"
        objects.mkdir()
        for seed in (5, 6):
            spec.write_text(SCENE_TOML.replace("seed = 5", f"seed = {seed}"))
            assert main(["synth", "--spec", str(spec),
                         "--out", str(objects / f"obj{seed}")]) == 0
        ckpt = tmp_path / "ckpt.json"
        report_path = tmp_path / "report.json"
        assert main([
            "train", "--objects", str(objects),
            "--out-checkpoint", str(ckpt), "--out-report", str(report_path),
            "--epochs", "3", "--hidden", "8", "--pe-octaves", "2",
        ]) == 0
        report = json.loads(report_path.read_text())
        assert len(report["epoch_losses"]) == 3
        labels_out = tmp_path / "wlabels.txt"
        assert main([
            "lift-weighted", "--checkpoint", str(ckpt),
            "--cloud", str(objects / "obj5" / "cloud.txt"),
            "--detections", str(objects / "obj5" / "detections.json"),
            "--out-labels", str(labels_out), "--res", "160",
        ]) == 0
        assert labels_out.exists()

    def test_train_lr_zero_constant_loss(self, bundle_dir, tmp_path):
        objects = tmp_path / "objs"
        objects.mkdir()
        (objects / "o1").symlink_to(bundle_dir)
        ckpt = tmp_path / "ckpt.json"
        report_path = tmp_path / "report.json"
        assert main([
            "train", "--objects", str(objects),
            "--out-checkpoint", str(ckpt), "--out-report", str(report_path),
            "--epochs", "4", "--lr", "0", "--hidden", "8", "--pe-octaves", "2",
        ]) == 0
        report = json.loads(report_path.read_text())
        assert len(set(report["epoch_losses"])) == 1

    def test_train_config_file(self, bundle_dir, tmp_path):
        objects = tmp_path / "objs"
        objects.mkdir()
        (objects / "o1").symlink_to(bundle_dir)
        cfg = tmp_path / "train.toml"
        cfg.write_text("epochs = 2\nlr = 0.001\nhidden = 8\npe_octaves = 2\n")
        ckpt = tmp_path / "ckpt.json"
        report_path = tmp_path / "report.json"
        assert main([
            "train", "--objects", str(objects), "--config", str(cfg),
            "--out-checkpoint", str(ckpt), "--out-report", str(report_path),
        ]) == 0
        assert len(json.loads(report_path.read_text())["epoch_losses"]) == 2

    def test_baseline_conf(self, bundle_dir, tmp_path):
        objects = tmp_path / "objs"
        objects.mkdir()
        (objects / "o1").symlink_to(bundle_dir)
        out = tmp_path / "baseline.json"
        assert main([
            "baseline-conf", "--objects", str(objects), "--mode", "normalized",
            "--out", str(out),
        ]) == 0
        doc = json.loads(out.read_text())
        assert doc["mode"] == "normalized" and 0.0 <= doc["miou"] <= 1.0

    def test_gradcheck_passes(self):
        assert main(["gradcheck", "--instances", "3", "--seed", "0"]) == 0


class TestFreshCheckpointReduction:
    def test_untrained_checkpoint_matches_uniform_tau(self, tmp_path):
        # a drop-noised bundle keeps every score away from the exact-tie point
        from liftseg import synth, train as tr, vote, weightnet
        from liftseg.detect import compute_membership

        noise = synth.NoiseSpec(drop_rate=0.5, feature_dim=4)
        spec = synth.three_part_spec(3, noise=noise, points_per_part=200,
                                     resolution=160, views=6)
        bundle = synth.generate(spec)
        out = tmp_path / "bundle"
        synth.emit(bundle, str(out))
        ckpt = tmp_path / "fresh.json"
        params = weightnet.init_params(
            weightnet.encoded_dim(4, 4), hidden=16, seed=0
        )
        weightnet.save_checkpoint(params, str(ckpt), seed=0)
        labels_out = tmp_path / "labels.txt"
        assert main([
            "lift-weighted", "--checkpoint", str(ckpt),
            "--cloud", str(out / "cloud.txt"),
            "--detections", str(out / "detections.json"),
            "--out-labels", str(labels_out), "--res", "160",
        ]) == 0
        membership = compute_membership(
            bundle.scene.cloud, bundle.cameras, bundle.detections, "box"
        )
        smat, _ = vote.score_weighted_cached(
            bundle.scene.partition, bundle.visibility, membership,
            bundle.detections, np.full(len(bundle.detections), 10.0),
        )
        uniform = vote.assign_labels(
            vote.normalize_scores(smat, 10.0), bundle.scene.partition
        )
        got = vote.load_point_labels(str(labels_out))
        np.testing.assert_array_equal(got, uniform.point_labels)


class TestDeterminism:
    def test_synth_outputs_byte_identical(self, tmp_path):
        spec = tmp_path / "scene.toml"
        spec.write_text(SCENE_TOML)
        for run in range(2):
            assert main(["synth", "--spec", str(spec), "--threads", "1",
                         "--out", str(tmp_path / f"b{run}")]) == 0
        for name in ("cloud.txt", "detections.json", "gt_instances.txt", "oracle.json"):
            assert (tmp_path / "b0" / name).read_bytes() == (
                tmp_path / "b1" / name
            ).read_bytes()
