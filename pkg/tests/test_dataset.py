import json
import os

import numpy as np
import pytest

from box4d import annotate as ann
from box4d import dataset as io
from box4d import geometry as geo
from box4d import scene as synth
from box4d.errors import SchemaError
from box4d.records import SequenceClip

K = geo.CameraIntrinsics.default()


@pytest.fixture(scope="module")
def clip():
    scene, traj = synth.entering_object_scene(n_frames=10)
    raw = synth.render_sequence(scene, traj, K)
    return ann.annotate_clip(SequenceClip("entering_00000", scene.scene_id, raw.frames), scene)


def _assert_same_clip(a, b):
    assert (a.sequence_id, a.scene_id, a.start, len(a)) == (b.sequence_id, b.scene_id, b.start, len(b))
    for fa, fb in zip(a.frames, b.frames):
        assert fa.index == fb.index and fa.intrinsics == fb.intrinsics
        assert np.array_equal(fa.pose.as_matrix(), fb.pose.as_matrix())
        assert np.array_equal(fa.depth, fb.depth) and np.array_equal(fa.instance, fb.instance)
        assert len(fa.objects) == len(fb.objects)
        for oa, ob in zip(fa.objects, fb.objects):
            assert (oa.instance_id, oa.category, tuple(oa.prompt), oa.score) == (
                ob.instance_id, ob.category, tuple(ob.prompt), ob.score)
            assert oa.box.same_as(ob.box) and oa.box_world.same_as(ob.box_world)


def test_round_trip_is_exact(clip, tmp_path):
    entry = io.write_sequence(clip, tmp_path)
    assert entry == {"id": clip.sequence_id, "scene_id": "entering", "frames": len(clip), "path": "sequence.json"}
    back = io.read_sequence(tmp_path / "sequence.json")
    _assert_same_clip(clip, back)


def test_writes_are_byte_identical(clip, tmp_path):
    io.write_sequence(clip, tmp_path / "a")
    io.write_sequence(clip, tmp_path / "b")
    for name in sorted(os.listdir(tmp_path / "a" / "rasters")) + ["sequence.json"]:
        sub = "" if name.endswith(".json") else "rasters"
        assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()


def test_gt_score_is_one(clip, tmp_path):
    io.write_sequence(clip, tmp_path)
    doc = json.loads((tmp_path / "sequence.json").read_text())
    scores = [o["score"] for f in doc["frames"] for o in f["objects"]]
    assert scores and all(s == 1.0 for s in scores)


def test_raster_format(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "r.bin"
    io.write_raster(p, a)
    data = p.read_bytes()
    assert data[:4] == b"B4DR"
    assert np.frombuffer(data[4:16], "<u4").tolist() == [3, 2, 1]
    assert np.frombuffer(data[16:], "<f4").tolist() == list(range(6))
    assert np.array_equal(io.read_raster(p), a)


def test_raster_errors(tmp_path):
    p = tmp_path / "r.bin"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(SchemaError):
        io.read_raster(p)
    io.write_raster(p, np.zeros((2, 2), np.float32))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(SchemaError):
        io.read_raster(p)


def test_missing_raster_is_schema_error(clip, tmp_path):
    io.write_sequence(clip, tmp_path)
    os.remove(tmp_path / "rasters" / "depth_00001.bin")
    with pytest.raises(SchemaError):
        io.read_sequence(tmp_path / "sequence.json")
    # references are validated even when the rasters are not loaded
    with pytest.raises(SchemaError, match=r"frames\[1\]\.depth"):
        io.read_sequence(tmp_path / "sequence.json", load_rasters=False)


def _edit(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_unknown_schema_version(clip, tmp_path):
    io.write_sequence(clip, tmp_path)
    _edit(tmp_path / "sequence.json", lambda d: d.update(schema_version=99))
    with pytest.raises(SchemaError):
        io.read_sequence(tmp_path / "sequence.json")


def test_unknown_fields_warn(clip, tmp_path):
    io.write_sequence(clip, tmp_path)
    _edit(tmp_path / "sequence.json", lambda d: d["frames"][0].update(extra=1))
    with pytest.warns(UserWarning, match="extra"):
        io.read_sequence(tmp_path / "sequence.json")


def test_schema_error_names_field(clip, tmp_path):
    io.write_sequence(clip, tmp_path)
    _edit(tmp_path / "sequence.json", lambda d: d["frames"][1]["pose"].pop())
    with pytest.raises(SchemaError) as e:
        io.read_sequence(tmp_path / "sequence.json")
    assert e.value.path == "frames[1].pose"


def test_yaw_null_for_tilted_box(tmp_path):
    rx = np.array([[1, 0, 0], [0, 0.8, -0.6], [0, 0.6, 0.8]])
    b = geo.OrientedBox3D((1, 2, 3), (1, 1, 1), rx)
    doc = io.box_to_doc(b)
    assert doc["box"][6] is None
    assert io.box_from_doc(io._Reader(doc, "")).same_as(b)
    doc = io.box_to_doc(geo.OrientedBox3D.from_yaw((0, 0, 0), (1, 1, 1), 0.3))
    doc["box"][6] = 0.5
    with pytest.raises(SchemaError):
        io.box_from_doc(io._Reader(doc, ""))


def test_raw_round_trip(tmp_path):
    scene, traj = synth.entering_object_scene(n_frames=3)
    raw = synth.render_sequence(scene, traj, K)
    io.write_raw(raw, tmp_path)
    back = io.read_raw(tmp_path)
    assert [o.category for o in back.scene.objects] == [o.category for o in scene.objects]
    for a, b in zip(raw.frames, back.frames):
        assert np.array_equal(a.depth, b.depth) and np.array_equal(a.instance, b.instance)
        assert np.array_equal(a.pose.as_matrix(), b.pose.as_matrix())


def test_predictions_round_trip(clip, tmp_path):
    preds = io.ground_truth_predictions(clip)
    preds.append(io.PredictionRecord("x", 0, None, preds[0].box, 0.25))
    p = tmp_path / "pred.jsonl"
    io.write_predictions(preds, p)
    back = io.read_predictions(p)
    assert len(back) == len(preds)
    for a, b in zip(preds, back):
        assert (a.sequence_id, a.frame, a.instance_id, a.score, a.category) == (
            b.sequence_id, b.frame, b.instance_id, b.score, b.category)
        assert a.box.same_as(b.box)


def test_prediction_validation(tmp_path):
    box = geo.OrientedBox3D((0, 0, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        io.PredictionRecord("s", 0, 1, box, 1.5)
    p = tmp_path / "pred.jsonl"
    io.write_predictions([io.PredictionRecord("s", 0, 1, box, 0.5)] * 2, p)
    lines = p.read_text().splitlines()
    lines[1] = lines[1].replace('"score": 0.5', '"score": 2.0')
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="row 1"):
        io.read_predictions(p)
    p.write_text("{not json\n")
    with pytest.raises(SchemaError, match="row 0"):
        io.read_predictions(p)


def test_split_scenes():
    ids = [f"scene_{i:03d}" for i in range(10)]
    train, val = io.split_scenes(ids, 0.2, 0)
    assert len(val) == 2 and len(train) == 8
    assert not set(train) & set(val) and sorted(train + val) == ids
    assert io.split_scenes(ids, 0.2, 0) == (train, val)
    assert io.split_scenes(ids[:2], 0.01, 0)[1] != []
    assert io.split_scenes(ids[:1], 0.5, 0) == (ids[:1], [])
    with pytest.raises(ValueError):
        io.split_scenes(ids, 1.0, 0)


def test_manifest(clip, tmp_path):
    entry = io.write_sequence(clip, tmp_path / clip.sequence_id)
    entry["path"] = f"{clip.sequence_id}/{entry['path']}"
    entry["split"] = "val"
    io.write_manifest([entry], tmp_path)
    (got,) = io.read_manifest(tmp_path)
    assert got["split"] == "val" and os.path.isfile(got["path"])
    with pytest.raises(ValueError):
        io.write_manifest([entry, entry], tmp_path)
    _edit(tmp_path / "manifest.json", lambda d: d["sequences"][0].update(split="test"))
    with pytest.raises(SchemaError):
        io.read_manifest(tmp_path)
    with pytest.raises(SchemaError):
        io.read_manifest(tmp_path / "nope")
