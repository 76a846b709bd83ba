import json
import shutil
import subprocess
import sys

import pytest

from srmdet.cli import main
from srmdet.dataset import GroundTruthObject, Scene, save_profile, write_scenes
from srmdet.detect import read_detections
from srmdet.geometry import BoundingBox, ImageExtent
from srmdet.srm import load_srm

from test_dataset import small_profile
from test_evaluation import fixture_3gt_4det

VOC_CLASSES = ["aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
               "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
               "train", "tvmonitor"]
FAST_CONFIG = {"engine": {"budgets": {"LARGE": 10, "MEDIUM": 20, "SMALL": 10}, "oversample": 10},
               "scorer": {"spec": "oracle", "noise_sigma": 0.05, "seed": 1}}


@pytest.fixture
def pipeline(tmp_path):
    save_profile(small_profile(clutter_level=3.0), tmp_path / "profile.json")
    (tmp_path / "run.json").write_text(json.dumps(FAST_CONFIG))
    assert main(["gen-scenes", "--profile", str(tmp_path / "profile.json"), "--count", "12", "--seed", "4",
                 "--out", str(tmp_path / "scenes.jsonl")]) == 0
    assert main(["train-srm", "--annotations", str(tmp_path / "scenes.jsonl"), "--out", str(tmp_path / "m.json")]) == 0
    return tmp_path


def detect(tmp, mode, out, *extra):
    return main(["detect", "--srm", str(tmp / "m.json"), "--scenes", str(tmp / "scenes.jsonl"), "--mode", mode,
                 "--config", str(tmp / "run.json"), "--out", str(tmp / out), *extra])


def test_full_pipeline(pipeline, capsys):
    tmp = pipeline
    assert detect(tmp, "baseline", "base.jsonl") == 0
    assert detect(tmp, "sparcnn", "srm.jsonl") == 0
    capsys.readouterr()
    assert main(["evaluate", "--detections", str(tmp / "base.jsonl"), "--detections", str(tmp / "srm.jsonl"),
                 "--ground-truth", str(tmp / "scenes.jsonl"), "--out", str(tmp / "ab.json")]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split() == ["METRIC", "BASELINE", "SPARCNN", "%CHANGE"]
    rec = json.loads((tmp / "ab.json").read_text())
    assert rec["kind"] == "ab" and set(rec["pct_change"]) == {"accuracy", "recall", "precision", "f1", "mAP"}
    resolved = json.loads((tmp / "srm.jsonl.config.json").read_text())
    assert resolved["command"] == "detect" and resolved["engine"]["mode"] == "sparcnn"
    assert (tmp / "scenes.jsonl.profile.json").exists()


def test_pass_zero_shared_between_modes(pipeline):
    tmp = pipeline
    detect(tmp, "baseline", "base.jsonl")
    detect(tmp, "sparcnn", "srm.jsonl")
    with open(tmp / "base.jsonl") as f:
        _, base = read_detections(f)
    with open(tmp / "srm.jsonl") as f:
        _, rec = read_detections(f)
    for b, r in zip(base, rec):
        first = {(d.class_label, d.box) for d in r.detections if d.pass_index == 0 and d.tier == "LARGE"}
        assert first == {(d.class_label, d.box) for d in b.detections if d.tier == "LARGE"}


def test_deterministic(pipeline):
    tmp = pipeline
    detect(tmp, "sparcnn", "a.jsonl")
    detect(tmp, "sparcnn", "b.jsonl")
    assert (tmp / "a.jsonl").read_text() == (tmp / "b.jsonl").read_text()


def test_identical_files_zero_deltas(pipeline, capsys):
    tmp = pipeline
    detect(tmp, "sparcnn", "a.jsonl")
    main(["evaluate", "--detections", str(tmp / "a.jsonl"), "--detections", str(tmp / "a.jsonl"),
          "--ground-truth", str(tmp / "scenes.jsonl"), "--out", str(tmp / "ab.json")])
    change = json.loads((tmp / "ab.json").read_text())["pct_change"]
    assert all(v == 0 for v in change.values() if v is not None)


def test_empty_scenes_give_header_only(tmp_path):
    write_scenes([Scene("e1", ImageExtent(64, 64), ())], tmp_path / "empty.jsonl")
    write_scenes([Scene("t", ImageExtent(64, 64), (GroundTruthObject("dog", BoundingBox(0, 0, 10, 10)),))],
                 tmp_path / "train.jsonl")
    main(["train-srm", "--annotations", str(tmp_path / "train.jsonl"), "--out", str(tmp_path / "m.json")])
    assert main(["detect", "--srm", str(tmp_path / "m.json"), "--scenes", str(tmp_path / "empty.jsonl"),
                 "--out", str(tmp_path / "d.jsonl")]) == 0
    with open(tmp_path / "d.jsonl") as f:
        header, results = read_detections(f)
    assert header["classes"] == ["dog"] and results[0].detections == []


def test_evaluate_hand_fixture(tmp_path, capsys):
    scene, dets = fixture_3gt_4det()
    write_scenes([scene], tmp_path / "gt.jsonl")
    lines = [json.dumps({"format": "srmdet.detections", "version": 1, "mode": "sparcnn", "classes": ["cat", "dog"]}),
             json.dumps({"scene_id": "f", "detections": [d.to_record() for d in dets], "error": None})]
    (tmp_path / "d.jsonl").write_text("\n".join(lines) + "\n")
    assert main(["evaluate", "--detections", str(tmp_path / "d.jsonl"), "--ground-truth", str(tmp_path / "gt.jsonl"),
                 "--out", str(tmp_path / "r.json")]) == 0
    rec = json.loads((tmp_path / "r.json").read_text())
    assert (rec["tp"], rec["fp"], rec["fn"]) == (2, 2, 1)
    assert round(rec["accuracy"], 3) == 0.4 and round(rec["f1"], 3) == 0.571


def test_train_tiny_fixture(tmp_path, capsys):
    scenes = [Scene(f"s{i}", ImageExtent(50, 50), (GroundTruthObject(c, BoundingBox(0, 0, 10, 10)),))
              for i, c in enumerate(["cat", "dog", "cat"])]
    write_scenes(scenes, tmp_path / "s.jsonl")
    assert main(["train-srm", "--annotations", str(tmp_path / "s.jsonl"), "--out", str(tmp_path / "m.json")]) == 0
    assert load_srm(tmp_path / "m.json").classes == ["cat", "dog"]
    assert "classes: 2" in capsys.readouterr().out


def test_train_voc_directory(tmp_path, capsys):
    scenes = [Scene(f"{i:06d}", ImageExtent(100, 100), (GroundTruthObject(c, BoundingBox(10, 10, 60, 80)),))
              for i, c in enumerate(VOC_CLASSES)]
    write_scenes(scenes, tmp_path / "Annotations", "voc-dir")
    assert main(["train-srm", "--annotations", str(tmp_path / "Annotations"), "--format", "voc-dir",
                 "--out", str(tmp_path / "m.json")]) == 0
    assert load_srm(tmp_path / "m.json").n == 20


@pytest.mark.parametrize("argv", [
    ["train-srm", "--annotations", "{tmp}/emptydir", "--format", "voc-dir", "--out", "{tmp}/m.json"],
    ["evaluate", "--detections", "{tmp}/missing.jsonl", "--ground-truth", "{tmp}/missing.jsonl"],
    ["gen-scenes", "--profile", "{tmp}/nope.json", "--count", "3", "--out", "{tmp}/s.jsonl"],
])
def test_errors_exit_nonzero(tmp_path, capsys, argv):
    (tmp_path / "emptydir").mkdir()
    assert main([a.format(tmp=tmp_path) for a in argv]) != 0
    captured = capsys.readouterr()
    assert captured.err and not captured.out


def test_vocabulary_mismatch(pipeline):
    tmp = pipeline
    write_scenes([Scene("z", ImageExtent(64, 64), (GroundTruthObject("zebra", BoundingBox(0, 0, 9, 9)),))],
                 tmp / "zebra.jsonl")
    assert main(["detect", "--srm", str(tmp / "m.json"), "--scenes", str(tmp / "zebra.jsonl"),
                 "--out", str(tmp / "d.jsonl")]) != 0


def test_strict_exit_code_on_scene_failure(pipeline):
    tmp = pipeline
    victim = json.loads((tmp / "scenes.jsonl").read_text().splitlines()[2])["scene_id"]
    scorer = f"external:{sys.executable} -m srmdet.stub_scorer --oracle {tmp / 'scenes.jsonl'} --crash-on-scene {victim}"
    assert detect(tmp, "sparcnn", "d.jsonl", "--scorer", scorer) == 0
    assert detect(tmp, "sparcnn", "d2.jsonl", "--scorer", scorer, "--strict") == 3
    with open(tmp / "d.jsonl") as f:
        _, results = read_detections(f)
    assert [r.scene_id for r in results if r.error] == [victim]


@pytest.mark.skipif(shutil.which("srmdet") is None, reason="console script not installed")
def test_console_script(tmp_path):
    out = subprocess.run(["srmdet", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "srmdet" in out.stdout
