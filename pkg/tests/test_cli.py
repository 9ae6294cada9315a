import filecmp
import json
import os
import subprocess
import sys

import pytest

from box4d import cli
from box4d import dataset as io

SMALL = ["--n-scenes", "2", "--n-frames", "6", "--clip-len", "4", "--stride", "2", "--n-objects", "3"]


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    assert not mismatch and not errors
    for sub in cmp.common_dirs:
        _same_tree(os.path.join(a, sub), os.path.join(b, sub))


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "run"
    assert cli.main(["generate", "--out", str(out), "--seed", "5", *SMALL]) == 0
    return out


def test_generate_layout(generated):
    assert (generated / "config.json").is_file()
    assert sorted(os.listdir(generated / "raw")) == ["scene_000", "scene_001"]
    entries = io.read_manifest(generated / "dataset")
    assert len(entries) == 4
    assert {e["split"] for e in entries} == {"train", "val"}
    # splits never cut a scene in two
    by_scene = {}
    for e in entries:
        by_scene.setdefault(e["scene_id"], set()).add(e["split"])
    assert all(len(s) == 1 for s in by_scene.values())


def test_generate_is_byte_identical(generated, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["generate", "--out", str(again), "--seed", "5", *SMALL]) == 0
    _same_tree(generated, again)


def test_annotate_reproduces_generate(generated, tmp_path):
    out = tmp_path / "ds"
    rc = cli.main(["annotate", "--raw", str(generated / "raw"), "--out", str(out),
                   "--config", str(generated / "config.json")])
    assert rc == 0
    _same_tree(generated / "dataset", out)


def test_annotate_override_changes_output(generated, tmp_path):
    out = tmp_path / "ds"
    rc = cli.main(["annotate", "--raw", str(generated / "raw"), "--out", str(out),
                   "--config", str(generated / "config.json"), "--depth-max", "0.5"])
    assert rc == 0
    for e in io.read_manifest(out):
        clip = io.read_sequence(e["path"], load_rasters=False)
        assert all(not f.objects for f in clip.frames)


def test_annotate_missing_raster_exits_2(generated, tmp_path):
    raw = tmp_path / "raw"
    import shutil

    shutil.copytree(generated / "raw", raw)
    victim = sorted((raw / "scene_000" / "rasters").iterdir())[0]
    victim.unlink()
    assert cli.main(["annotate", "--raw", str(raw), "--out", str(tmp_path / "o")]) == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_scenes": 1, "n_frames": 4, "clip_len": 4, "stride": 4, "scene": {"n_objects": 2}}))
    out = tmp_path / "o"
    assert cli.main(["generate", "--config", str(cfg), "--out", str(out), "--n-objects", "1"]) == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["n_scenes"] == 1 and resolved["scene"]["n_objects"] == 1


def test_zero_objects_allowed(tmp_path):
    args = ["generate", "--out", str(tmp_path / "o"), "--n-scenes", "1", "--n-frames", "3", "--clip-len", "3",
            "--stride", "1", "--n-objects", "0"]
    assert cli.main(args) == 0


@pytest.mark.parametrize(
    "extra",
    [["--stride", "5", "--clip-len", "3"], ["--val-fraction", "1.5"], ["--depth-max", "-1"], ["--min-pixels", "0"]],
)
def test_generate_usage_errors(tmp_path, extra, capsys):
    assert cli.main(["generate", "--out", str(tmp_path / "o"), "--n-frames", "6", *extra]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_config_json(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{oops")
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text(json.dumps({"unknown_key": 1}))
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_is_io_error(tmp_path):
    assert cli.main(["generate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 3


def test_eval_from_gt(generated, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--gt", str(generated / "dataset"), "--pred-from-gt", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["ap3d_mean"] == 1.0 and report["f1@0.50"] == 1.0
    assert (out / "report.tsv").read_text().startswith("metric\tvalue\n")


def test_eval_prediction_file(generated, tmp_path):
    gts, _ = cli.load_ground_truth(str(generated / "dataset"))
    pred = tmp_path / "p.jsonl"
    io.write_predictions(gts, pred)
    assert cli.main(["eval", "--gt", str(generated / "dataset"), "--pred", str(pred), "--out", str(tmp_path / "e")]) == 0
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["eval", "--gt", str(generated / "dataset"), "--pred", str(empty), "--out", str(tmp_path / "f")]) == 0
    report = json.loads((tmp_path / "f" / "report.json").read_text())
    assert report["ap3d_mean"] == 0.0 and report["var_v"] is None


def test_eval_malformed_row(generated, tmp_path, capsys):
    pred = tmp_path / "p.jsonl"
    pred.write_text('{"sequence_id": "a"}\n')
    rc = cli.main(["eval", "--gt", str(generated / "dataset"), "--pred", str(pred), "--out", str(tmp_path / "e")])
    assert rc == 2
    assert "row 0" in capsys.readouterr().err


def test_eval_requires_predictions(generated, tmp_path):
    assert cli.main(["eval", "--gt", str(generated / "dataset"), "--out", str(tmp_path / "e")]) == 2


def test_losscheck_exit_codes(capsys):
    assert cli.main(["losscheck", "--points", "2", "--loss", "l_center", "--loss", "l_iou3d"]) == 0
    out = capsys.readouterr().out
    assert "l_center" in out and "PASS" in out
    assert cli.main(["losscheck", "--points", "2", "--loss", "l_center", "--inject-gradient-error", "0.5"]) == 1
    assert cli.main(["losscheck", "--points", "2", "--loss", "l_dim", "--strict"]) == 1
    assert cli.main(["losscheck", "--loss", "nope"]) == 2


def test_losscheck_seed_changes_points_not_verdict(capsys):
    assert cli.main(["losscheck", "--points", "3", "--loss", "l_corner", "--seed", "1"]) == 0
    a = capsys.readouterr().out
    assert cli.main(["losscheck", "--points", "3", "--loss", "l_corner", "--seed", "2"]) == 0
    b = capsys.readouterr().out
    assert a != b


def test_decoder_demo(generated, capsys):
    args = ["decoder-demo", "--T", "3", "--N", "2", "--M", "3", "--d", "16", "--trials", "5", "--grad-params", "8"]
    assert cli.main(args + ["--dataset", str(generated / "dataset")]) == 0
    out = capsys.readouterr().out
    assert "causality" in out and "gradient check" in out and "dataset clip" in out
    assert cli.main(args + ["--inject-gradient-error", "0.01"]) == 1
    assert cli.main(args[:1] + ["--d", "12"]) == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "box4d", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("generate", "annotate", "eval", "losscheck", "decoder-demo"):
        assert sub in res.stdout
