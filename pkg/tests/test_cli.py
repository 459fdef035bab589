import json
import sys
import textwrap

import numpy as np
import pytest

from regcd.cli import main
from regcd.evalbench import registration_error
from regcd.geomest import Homography
from regcd.raster import Raster, load_raster, save_raster

from conftest import textured


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    """A synthetic aligned pair plus its level-1 and level-3 bundles."""
    d = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--out", str(d / "pair"), "--seed", "4", "--width", "512", "--height", "512"]) == 0
    for lv in (1, 3):
        assert main(["warpgen", str(d / "pair/t1.png"), str(d / "pair/t2_aligned.png"),
                     str(d / "pair/gt_change.png"), "--level", str(lv), "--seed", "7",
                     "--out", str(d / f"lv{lv}")]) == 0
    return d


# ---------------------------------------------------------------- warpgen

def test_warpgen_deterministic(scene, tmp_path):
    args = [str(scene / "pair/t1.png"), str(scene / "pair/t2_aligned.png"), str(scene / "pair/gt_change.png"),
            "--level", "1", "--seed", "7"]
    assert main(["warpgen", *args, "--out", str(tmp_path / "a")]) == 0
    assert _tree(tmp_path / "a") == _tree(scene / "lv1")
    assert sorted(_tree(scene / "lv1")) == ["gt_change.png", "gt_h.json", "spec.json", "t1.png", "t2_distorted.png"]


def test_warpgen_level_out_of_range(scene, tmp_path, capsys):
    rc = main(["warpgen", str(scene / "pair/t1.png"), str(scene / "pair/t2_aligned.png"),
               str(scene / "pair/gt_change.png"), "--level", "4", "--out", str(tmp_path)])
    assert rc == 2
    assert "level" in capsys.readouterr().err


def test_warpgen_dimension_mismatch(scene, tmp_path, capsys):
    save_raster(textured(100, 90), tmp_path / "small.png")
    rc = main(["warpgen", str(scene / "pair/t1.png"), str(tmp_path / "small.png"),
               str(scene / "pair/gt_change.png"), "--level", "1", "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "dimension" in capsys.readouterr().err
    assert not any((tmp_path / "o").rglob("*.*"))


# ---------------------------------------------------------------- register

def test_register_self(scene, tmp_path):
    t1 = str(scene / "pair/t1.png")
    assert main(["register", t1, t1, "--out", str(tmp_path)]) == 0
    h = np.array(json.loads((tmp_path / "h.json").read_text())["h"])
    assert np.abs(h - np.eye(3)).max() < 1e-3
    poly = json.loads((tmp_path / "overlap.json").read_text())["vertices"]
    assert np.allclose(sorted(map(tuple, poly)), [(0, 0), (0, 512), (512, 0), (512, 512)], atol=1e-6)
    rep = json.loads((tmp_path / "register_report.json").read_text())
    assert set(rep["keypoints"]) == {"original", "stride2", "stride4", "total"}
    assert rep["keypoints"]["total"] == sum(rep["keypoints"][k] for k in ("original", "stride2", "stride4"))
    csv = (tmp_path / "keypoint_counts.csv").read_text().splitlines()
    assert csv[0] == "level,keypoints,inliers" and len(csv) == 5
    for name in ("t2_registered.png", "validity.png", "keypoints.json", "config.json"):
        assert (tmp_path / name).exists()


def test_register_level1_accuracy(scene, tmp_path):
    assert main(["register", str(scene / "lv1/t1.png"), str(scene / "lv1/t2_distorted.png"),
                 "--out", str(tmp_path)]) == 0
    est = Homography.from_json(json.loads((tmp_path / "h.json").read_text()))
    gt = Homography.from_json(json.loads((scene / "lv1/gt_h.json").read_text()))
    assert registration_error(est, gt, 512, 512)[0] < 2.0


def test_register_featureless_fails_cleanly(tmp_path, capsys):
    flat = Raster(np.full((128, 128), 90, dtype=np.uint8))
    save_raster(flat, tmp_path / "flat.png")
    out = tmp_path / "out"
    rc = main(["register", str(tmp_path / "flat.png"), str(tmp_path / "flat.png"), "--out", str(out)])
    assert rc == 1
    assert "failed" in capsys.readouterr().err
    assert not [p for p in out.rglob("*") if p.is_file()]


def test_missing_config_is_usage_error(scene, tmp_path):
    t1 = str(scene / "pair/t1.png")
    assert main(["register", t1, t1, "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert main(["pipeline", t1, t1, "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_bad_config_values(scene, tmp_path):
    t1 = str(scene / "pair/t1.png")
    for body in ({"tile_size": 8}, {"unknown": 1}, {"ransac": {"inlier_threshold": -1}}, "[]"):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(body if isinstance(body, str) else json.dumps(body))
        assert main(["register", t1, t1, "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_usage_errors():
    assert main([]) == 2
    assert main(["register", "only-one.png", "--out", "x"]) == 2
    assert main(["eval", "a.png", "b.png", "--out", "x", "--workers", "0"]) == 2


# ---------------------------------------------------------------- detect

def test_detect_identical_pair(scene, tmp_path):
    t1 = str(scene / "pair/t1.png")
    save_raster(Raster(np.full((512, 512), 255, dtype=np.uint8)), tmp_path / "valid.png")
    assert main(["detect", t1, t1, str(tmp_path / "valid.png"), "--out", str(tmp_path / "o")]) == 0
    assert not load_raster(tmp_path / "o/change_map.png").data.any()


def test_detect_aligned_scene_f1(scene, tmp_path):
    save_raster(Raster(np.full((512, 512), 255, dtype=np.uint8)), tmp_path / "valid.png")
    assert main(["detect", str(scene / "pair/t1.png"), str(scene / "pair/t2_aligned.png"),
                 str(tmp_path / "valid.png"), "--out", str(tmp_path / "o")]) == 0
    assert main(["eval", str(tmp_path / "o/change_map.png"), str(scene / "pair/gt_change.png"),
                 "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e/metrics.json").read_text())["f1"] >= 0.90


def test_detect_empty_validity_warns(scene, tmp_path, caplog):
    save_raster(Raster(np.zeros((512, 512), dtype=np.uint8)), tmp_path / "valid.png")
    assert main(["detect", str(scene / "pair/t1.png"), str(scene / "pair/t2_aligned.png"),
                 str(tmp_path / "valid.png"), "--out", str(tmp_path / "o")]) == 0
    assert not load_raster(tmp_path / "o/change_map.png").data.any()
    assert "validity" in caplog.text


# ---------------------------------------------------------------- pipeline

def test_pipeline_identical_pair(scene, tmp_path):
    t1 = str(scene / "pair/t1.png")
    assert main(["pipeline", t1, t1, "--out", str(tmp_path)]) == 0
    h = np.array(json.loads((tmp_path / "h.json").read_text())["h"])
    assert np.abs(h - np.eye(3)).max() < 1e-3
    assert not load_raster(tmp_path / "change_map.png").data.any()


def test_pipeline_level3_with_metrics(scene, tmp_path):
    d = scene / "lv3"
    assert main(["pipeline", str(d / "t1.png"), str(d / "t2_distorted.png"), "--gt", str(d / "gt_change.png"),
                 "--gt-h", str(d / "gt_h.json"), "--out", str(tmp_path), "--figures"]) == 0
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert rep["f1"] >= 0.85
    assert rep["registration_error"]["mean_px"] < 5.0
    assert (tmp_path / "metrics.csv").read_text().startswith("precision,recall,f1,iou,oa,tp,fp,fn,tn\n")
    for fig in ("figures/matches.png", "figures/change_overlay.png"):
        assert (tmp_path / fig).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_pipeline_equals_register_then_detect(scene, tmp_path):
    d = scene / "lv3"
    t1, t2 = str(d / "t1.png"), str(d / "t2_distorted.png")
    assert main(["pipeline", t1, t2, "--out", str(tmp_path / "p")]) == 0
    assert main(["register", t1, t2, "--out", str(tmp_path / "r")]) == 0
    r = tmp_path / "r"
    assert main(["detect", t1, str(r / "t2_registered.png"), str(r / "validity.png"),
                 "--overlap", str(r / "overlap.json"), "--out", str(tmp_path / "d")]) == 0
    piped = _tree(tmp_path / "p")
    staged = {**_tree(tmp_path / "r"), **_tree(tmp_path / "d")}
    assert piped == staged


# ---------------------------------------------------------------- eval

def test_eval_examples(tmp_path):
    gt = np.zeros((20, 50), dtype=np.uint8)
    gt[:, :5] = 255
    save_raster(Raster(gt), tmp_path / "gt.png")
    save_raster(Raster(np.zeros_like(gt)), tmp_path / "zero.png")
    save_raster(Raster(255 - gt), tmp_path / "neg.png")

    assert main(["eval", str(tmp_path / "gt.png"), str(tmp_path / "gt.png"), "--out", str(tmp_path / "a")]) == 0
    a = json.loads((tmp_path / "a/metrics.json").read_text())
    assert a["f1"] == a["iou"] == a["oa"] == 1.0

    assert main(["eval", str(tmp_path / "zero.png"), str(tmp_path / "gt.png"), "--out", str(tmp_path / "b")]) == 0
    b = json.loads((tmp_path / "b/metrics.json").read_text())
    assert b["f1"] == 0 and b["oa"] == pytest.approx(900 / 1000)

    assert main(["eval", str(tmp_path / "gt.png"), str(tmp_path / "gt.png"), "--mask", str(tmp_path / "neg.png"),
                 "--out", str(tmp_path / "c")]) == 0
    c = json.loads((tmp_path / "c/metrics.json").read_text())
    assert c["confusion"]["tp"] == 0 and c["f1"] == 0 and c["oa"] == 1.0


def test_eval_dimension_mismatch(tmp_path):
    save_raster(Raster(np.zeros((10, 10), dtype=np.uint8)), tmp_path / "a.png")
    save_raster(Raster(np.zeros((10, 12), dtype=np.uint8)), tmp_path / "b.png")
    assert main(["eval", str(tmp_path / "a.png"), str(tmp_path / "b.png"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o/metrics.json").exists()


# ---------------------------------------------------------------- plugins through the config

def test_subprocess_plugins_via_config(scene, tmp_path):
    matcher = tmp_path / "shift_matcher.py"
    matcher.write_text(textwrap.dedent("""
        import json, sys
        from PIL import Image
        a, b, out = sys.argv[1:4]
        w, h = Image.open(a).size
        pairs = [{"t1": [x, y], "t2": [x, y], "conf": 1.0, "scale": 1}
                 for x in range(4, w - 4, max(1, w // 8)) for y in range(4, h - 4, max(1, h // 8))]
        json.dump({"pairs": pairs}, open(out, "w"))
    """))
    seg = tmp_path / "empty_segmenter.py"
    seg.write_text("import json, sys\njson.dump({'masks': []}, open(sys.argv[2], 'w'))\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"matcher": [sys.executable, str(matcher)],
                               "segmenter": [sys.executable, str(seg)], "tile_size": 128}))
    t1 = str(scene / "pair/t1.png")
    assert main(["pipeline", t1, t1, "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    resolved = json.loads((tmp_path / "o/config.json").read_text())
    assert resolved["tile_size"] == 128 and resolved["matcher"][1] == str(matcher)
    h = np.array(json.loads((tmp_path / "o/h.json").read_text())["h"])
    assert np.abs(h - np.eye(3)).max() < 1e-9

    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"matcher": [sys.executable, "-c", "import sys; sys.exit(5)"]}))
    assert main(["register", t1, t1, "--config", str(broken), "--out", str(tmp_path / "b")]) == 1
