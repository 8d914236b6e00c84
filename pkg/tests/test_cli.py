import json
import subprocess
import sys
import time

import numpy as np
import pytest

from rht import dataio, metrics, rhm
from rht.cli import main


@pytest.fixture
def files(tmp_path):
    r = np.random.default_rng(0)
    pts = r.uniform(20, 100, size=(68, 2))
    dataio.write_pts(tmp_path / "face.pts", dataio.PtsAnnotation(pts))
    dataio.write_image(tmp_path / "t.pgm", r.random((40, 40)))
    dataio.write_image(tmp_path / "r.ppm", r.random((40, 40, 3)))
    small = r.uniform(5, 30, size=(5, 2))
    dataio.write_pts(tmp_path / "small.pts", dataio.PtsAnnotation(small))
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_render_68_points_gives_81_channels(files, capsys):
    code, out, _ = run(capsys, "render", "--pts", files / "face.pts", "--size", 128, "--out", files / "h.rhm")
    assert code == 0
    assert rhm.read(files / "h.rhm").shape == (128, 128, 81)


def test_render_sigma_zero(files, capsys):
    code, _, err = run(capsys, "render", "--pts", files / "face.pts", "--size", 64, "--sigma", 0,
                       "--out", files / "h.rhm")
    assert code == 1 and "sigma" in err


def test_unknown_flag_rejected(files, capsys):
    code, _, err = run(capsys, "render", "--pts", files / "face.pts", "--size", 64, "--out", files / "h.rhm",
                       "--colour", "red")
    assert code == 1 and "--colour" in err


def test_missing_file_is_input_error(files, capsys):
    code, _, _ = run(capsys, "render", "--pts", files / "nope.pts", "--size", 64, "--out", files / "h.rhm")
    assert code == 1


def test_render_custom_boundaries(files, capsys):
    (files / "b.json").write_text(json.dumps({"boundaries": [[0, 1, 2], [3, 4]]}))
    code, out, _ = run(capsys, "render", "--pts", files / "small.pts", "--size", 32, "--boundaries",
                       files / "b.json", "--out", files / "s.rhm", "--json")
    assert code == 0
    assert json.loads(out)["shape"] == [32, 32, 7]


def test_visualize_max_255_and_stable(files, capsys):
    run(capsys, "render", "--pts", files / "face.pts", "--size", 64, "--image-size", 128, 128,
        "--out", files / "h.rhm")
    for name in ("a.pgm", "b.pgm"):
        code, _, _ = run(capsys, "visualize", "--in", files / "h.rhm", "--channel", 30, "--out", files / name)
        assert code == 0
    img = (files / "a.pgm").read_bytes()
    assert img == (files / "b.pgm").read_bytes()
    assert max(img[len(b"P5\n64 64\n255\n"):]) == 255
    # rendering again from the same inputs gives byte-identical images
    run(capsys, "render", "--pts", files / "face.pts", "--size", 64, "--image-size", 128, 128,
        "--out", files / "h2.rhm")
    run(capsys, "visualize", "--in", files / "h2.rhm", "--channel", 30, "--out", files / "c.pgm")
    assert (files / "c.pgm").read_bytes() == img


def test_visualize_bad_channel(files, capsys):
    run(capsys, "render", "--pts", files / "small.pts", "--size", 32, "--out", files / "s.rhm")
    code, _, _ = run(capsys, "visualize", "--in", files / "s.rhm", "--channel", 99, "--out", files / "x.pgm")
    assert code == 1


def make_dirs(base, preds, truths):
    for sub, sets in (("pred", preds), ("truth", truths)):
        (base / sub).mkdir(exist_ok=True)
        for stem, pts in sets.items():
            dataio.write_pts(base / sub / f"{stem}.pts", dataio.PtsAnnotation(np.asarray(pts, float)))


def test_evaluate_identical_dirs(tmp_path, capsys):
    r = np.random.default_rng(1)
    sets = {f"img{i}": r.uniform(0, 100, size=(68, 2)) for i in range(3)}
    make_dirs(tmp_path, sets, sets)
    code, out, _ = run(capsys, "evaluate", "--pred-dir", tmp_path / "pred", "--truth-dir", tmp_path / "truth",
                       "--report", tmp_path / "r.json", "--json")
    assert code == 0
    d = json.loads(out)
    assert (d["mean_nme"], d["failure_rate"], d["auc"]) == (0.0, 0.0, 1.0)
    assert (tmp_path / "r_curve.csv").exists()


def test_evaluate_hand_built_two_images(tmp_path, capsys):
    truth = {"a": [[0, 0], [10, 0]], "b": [[0, 0], [10, 0]]}
    pred = {"a": [[3, 4], [10, 0]], "b": [[0, 0], [10, 0]]}
    make_dirs(tmp_path, pred, truth)
    (tmp_path / "m.json").write_text(json.dumps({
        "convention": {"n_landmarks": 2, "eye_corners": [0, 1]},
        "entries": [{"image": "a.pgm", "pts": "a.pts", "box": [0, 0, 100, 64]},
                    {"image": "b.pgm", "pts": "b.pts", "box": [0, 0, 100, 64]}]}))
    code, _, _ = run(capsys, "evaluate", "--pred-dir", tmp_path / "pred", "--truth-dir", tmp_path / "truth",
                     "--manifest", tmp_path / "m.json", "--norm", "interocular", "--report", tmp_path / "r.json")
    assert code == 0
    d = json.loads((tmp_path / "r.json").read_text())
    # per image: mean error (5 + 0) / 2 over interocular distance 10
    assert d["per_image"] == {"a": 0.25, "b": 0.0}
    want = metrics.evaluate(["a", "b"], [pred["a"], pred["b"]], [truth["a"], truth["b"]], 10.0)
    assert d["mean_nme"] == want.mean_nme and d["auc"] == want.auc and d["failure_rate"] == want.failure_rate
    code, _, _ = run(capsys, "evaluate", "--pred-dir", tmp_path / "pred", "--truth-dir", tmp_path / "truth",
                     "--manifest", tmp_path / "m.json", "--norm", "box_geomean", "--report", tmp_path / "r.json")
    assert code == 0
    assert json.loads((tmp_path / "r.json").read_text())["per_image"]["a"] == pytest.approx(2.5 / 80)


def test_evaluate_unmatched_stems(tmp_path, capsys):
    make_dirs(tmp_path, {"a": [[0, 0]], "x": [[0, 0]]}, {"a": [[0, 0]], "y": [[1, 1]]})
    code, _, err = run(capsys, "evaluate", "--pred-dir", tmp_path / "pred", "--truth-dir", tmp_path / "truth",
                       "--norm", "diag", "--report", tmp_path / "r.json")
    assert code == 1 and "'x'" in err and "'y'" in err


def test_evaluate_box_geomean_needs_boxes(tmp_path, capsys):
    make_dirs(tmp_path, {"a": [[0, 0], [1, 1]]}, {"a": [[0, 0], [2, 2]]})
    code, _, err = run(capsys, "evaluate", "--pred-dir", tmp_path / "pred", "--truth-dir", tmp_path / "truth",
                       "--norm", "box_geomean", "--report", tmp_path / "r.json")
    assert code == 1 and "box" in err


def test_transfer_writes_artifacts(files, capsys):
    code, out, _ = run(capsys, "transfer", "--target", files / "t.pgm", "--reference", files / "r.ppm",
                       "--ref-pts", files / "small.pts", "--out-dir", files / "tr", "--json")
    assert code == 0
    d = json.loads(out)
    tensors = rhm.read_named(files / "tr" / "transfer.rhm")
    assert tensors["fs.1x"].shape == (8, 8, 32) and tensors["fe.4x"].shape == (32, 32, 8)
    assert tensors["theta.2x"].shape == (2, 3) and tensors["attention.1x"].shape == (8, 8)
    np.testing.assert_array_equal(tensors["theta.1x"].ravel(), d["theta"]["1x"])


def test_fuse_and_determinism(files, capsys):
    args = ["fuse", "--target", files / "t.pgm", "--reference", files / "r.ppm", "--ref-pts", files / "small.pts",
            "--seed", 4]
    assert run(capsys, *args, "--out", files / "a.rhm", "--out-pts", files / "a.pts")[0] == 0
    assert run(capsys, *args, "--out", files / "b.rhm")[0] == 0
    assert (files / "a.rhm").read_bytes() == (files / "b.rhm").read_bytes()
    # no boundary convention for 5 points: landmark channels only
    assert rhm.read(files / "a.rhm").shape == (32, 32, 5)
    assert dataio.read_pts(files / "a.pts").n_points == 5


def test_overfit_and_checkpoint(files, capsys):
    code, out, _ = run(capsys, "overfit", "--steps", 4, "--out", files / "trace.csv", "--checkpoint", files / "ck",
                       "--json")
    assert code == 0
    d = json.loads(out)
    lines = (files / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 6
    assert float(lines[-1].split(",")[1]) == d["final"]
    # the overfit model uses two chained boundaries
    (files / "b.json").write_text(json.dumps({"boundaries": [[0, 1], [1, 2]]}))
    code, _, _ = run(capsys, "fuse", "--target", files / "t.pgm", "--reference", files / "r.ppm",
                     "--ref-pts", files / "small.pts", "--boundaries", files / "b.json", "--checkpoint", files / "ck",
                     "--out", files / "f.rhm")
    assert code == 0
    assert rhm.read(files / "f.rhm").shape == (32, 32, 7)
    # checkpoint built for 5+2 channels cannot serve a 68-point reference
    code, _, _ = run(capsys, "fuse", "--target", files / "t.pgm", "--reference", files / "r.ppm",
                     "--ref-pts", files / "face.pts", "--checkpoint", files / "ck", "--out", files / "f.rhm")
    assert code == 1


def test_selfcheck_all_pass(capsys):
    t0 = time.perf_counter()
    code, out, _ = run(capsys, "selfcheck", "--json")
    assert time.perf_counter() - t0 < 120
    rows = [json.loads(line) for line in out.splitlines()]
    items = [r for r in rows if "item" in r]
    assert len(items) > 20 and all(r["ok"] for r in items), [r for r in items if not r["ok"]]
    assert code == 0 and rows[-1]["failed"] == 0


def test_selfcheck_reports_failures(capsys, monkeypatch):
    from rht import selfcheck
    monkeypatch.setattr(selfcheck, "_loss_composition", lambda: (False, "forced"))
    code, out, _ = run(capsys, "selfcheck", "--quick")
    assert code == 2
    assert "FAIL  loss composition: forced" in out


def test_console_script_entry(files):
    res = subprocess.run([sys.executable, "-m", "rht", "render", "--pts", str(files / "small.pts"), "--size", "16",
                          "--out", str(files / "s.rhm"), "--json"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["command"] == "render"
    res = subprocess.run([sys.executable, "-m", "rht", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 1
