import json
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regcd.errors import ContractError, PluginError
from regcd.featpyr import fused_pyramid, gaussian_bank
from regcd.geomest import project
from regcd.matchkit import (BuiltinMatcher, KeypointSet, SubprocessMatcher, builtin_match,
                            corner_response, dedupe, detect_corners, hierarchical_match,
                            relocalize)
from regcd.raster import Raster, warp_raster

from conftest import textured


def _square():
    a = np.zeros((32, 32), dtype=np.uint8)
    a[10:22, 10:22] = 255
    return Raster(a)


def _as_set(kps):
    return {(tuple(np.round(a, 6)), tuple(np.round(b, 6))) for a, b in kps.pairs}


# ---------------------------------------------------------------- corners

def test_constant_image_has_no_corners():
    assert detect_corners(Raster(np.full((20, 20), 9, dtype=np.uint8))) == []


def test_square_corners():
    pts = detect_corners(_square())
    assert len(pts) == 4
    truth = np.array([[10, 10], [21, 10], [10, 21], [21, 21]], dtype=float)
    for x, y, _ in pts:
        assert np.hypot(*(truth - [x, y]).T).min() <= 2.0


def test_square_response_brute_force():
    # structure tensor minimum eigenvalue computed pixel by pixel
    a = _square().plane.astype(float)
    p = np.pad(a, 1, mode="symmetric")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]) / 8.0
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    for y in range(32):
        for x in range(32):
            win = p[y:y + 3, x:x + 3]
            gx[y, x] = (win * kx).sum()
            gy[y, x] = (win * kx.T).sum()
    gp = [np.pad(g, 1, mode="symmetric") for g in (gx * gx, gy * gy, gx * gy)]
    expected = np.zeros_like(a)
    for y in range(32):
        for x in range(32):
            sxx, syy, sxy = (g[y:y + 3, x:x + 3].sum() for g in gp)
            expected[y, x] = max(np.linalg.eigvalsh([[sxx, sxy], [sxy, syy]])[0], 0.0)
    assert np.allclose(corner_response(a), expected, atol=1e-8)


def test_rotated_square_same_count():
    sq = _square()
    rot = Raster(np.rot90(sq.plane).copy())
    assert len(detect_corners(rot)) == len(detect_corners(sq))


def test_corners_strongest_first_and_capped():
    pts = detect_corners(textured(80, 80, seed=3), max_points=15)
    assert len(pts) == 15
    s = [p[2] for p in pts]
    assert s == sorted(s, reverse=True)


def test_corner_nms_radius():
    pts = np.array([p[:2] for p in detect_corners(textured(80, 80, seed=3), nms_radius=4)])
    d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    # sub-pixel refinement moves each peak by at most half a pixel per axis
    assert d.min() > 4 - np.sqrt(2)


# ---------------------------------------------------------------- builtin matcher

def test_self_match():
    a = textured(128, 128, seed=1)
    k = builtin_match(a, a)
    assert len(k) > 50
    assert np.abs(k.t1 - k.t2).max() <= 0.5
    assert np.all((k.conf >= 0) & (k.conf <= 1))


def test_translation_displacement():
    big = textured(160, 160, seed=2)
    a = Raster(big.plane[10:138, 10:138])
    # b(x, y) = a(x - 7, y + 4): content moves by (7, -4)
    b = Raster(big.plane[14:142, 3:131])
    k = builtin_match(a, b)
    assert len(k) > 30
    disp = np.median(k.t2 - k.t1, axis=0)
    assert np.hypot(disp[0] - 7, disp[1] + 4) <= 1.0


def test_constant_partner_gives_empty():
    a = textured(64, 64)
    b = Raster(np.full((64, 64), 100, dtype=np.uint8))
    assert len(builtin_match(a, b)) == 0


def test_ratio_and_confidence_contract():
    m = BuiltinMatcher()
    a, b = textured(96, 96, seed=4), textured(96, 96, seed=5)
    pa, da = m.describe(a)
    pb, db = m.describe(b)
    dist = np.sqrt(((da[:, None, :] - db[None, :, :]) ** 2).sum(-1))
    k = m.match(a, b)
    for (p1, p2), c in zip(k.pairs, k.conf):
        i = int(np.argmin(np.hypot(*(pa - p1).T)))
        j = int(np.argmin(np.hypot(*(pb - p2).T)))
        assert np.argmin(dist[i]) == j and np.argmin(dist[:, j]) == i
        second = min(np.sort(dist[i])[1], np.sort(dist[:, j])[1])
        assert np.isclose(c, 1 - dist[i, j] / second)
        assert dist[i, j] / second < 0.9


@pytest.mark.parametrize("seed", [0, 7])
def test_builtin_match_symmetric(seed):
    a = textured(96, 96, seed=seed)
    t = np.deg2rad(5)
    h = np.array([[np.cos(t), -np.sin(t), 4], [np.sin(t), np.cos(t), -3], [0, 0, 1]])
    b, _ = warp_raster(a, h, 96, 96)
    assert _as_set(builtin_match(a, b)) == _as_set(builtin_match(b, a).swapped())


def test_matching_is_deterministic():
    a, b = textured(96, 96, seed=8), textured(96, 96, seed=9)
    assert builtin_match(a, b).to_json() == builtin_match(a, b).to_json()


def test_rotation_tolerance():
    a = textured(160, 160, seed=12)
    c = 79.5
    t = np.deg2rad(25)
    h = np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])
    shift = np.array([[1, 0, c], [0, 1, c], [0, 0, 1]])
    h = shift @ h @ np.linalg.inv(shift)
    b, _ = warp_raster(a, h, 160, 160)
    k = builtin_match(a, b)
    err = np.hypot(*(project(h, k.t1) - k.t2).T)
    assert (err < 3).sum() >= 20


# ---------------------------------------------------------------- KeypointSet

def test_keypoint_json_roundtrip():
    k = KeypointSet.from_arrays([[1.5, 2.0], [3, 4]], [[5, 6], [7.25, 8]], [0.5, 0.25], scale=2)
    obj = json.loads(json.dumps(k.to_json()))
    assert set(obj["pairs"][0]) == {"t1", "t2", "conf", "scale", "level"}
    back = KeypointSet.from_json(obj)
    assert back.to_json() == k.to_json()
    # minimal wire format accepted by plugins
    bare = KeypointSet.from_json({"pairs": [{"t1": [1, 2], "t2": [3, 4], "conf": 1, "scale": 1}]})
    assert len(bare) == 1 and bare.level[0] == 1


def test_keypoint_validation():
    with pytest.raises(ContractError):
        KeypointSet.from_arrays([[0, np.nan]], [[0, 0]], [1])
    with pytest.raises(ContractError):
        KeypointSet.from_json({"pairs": [{"t1": [1, 2]}]})
    assert len(KeypointSet.from_json({"pairs": []})) == 0


# ---------------------------------------------------------------- relocalize

def test_relocalize_examples():
    k2 = KeypointSet.from_arrays([[10, 20]], [[11, 19]], [0.7], scale=2)
    r2 = relocalize(k2)
    assert r2.pairs == [((20, 40), (22, 38))]
    assert r2.scale.tolist() == [1] and r2.conf.tolist() == [0.7]
    k4 = KeypointSet.from_arrays([[10, 20]], [[5, 5]], [0.3], scale=4)
    assert relocalize(k4).pairs == [((40, 80), (20, 20))]
    assert len(relocalize(KeypointSet.empty())) == 0


def test_relocalize_mixed_scales():
    a = KeypointSet.from_arrays([[1, 1]], [[1, 1]], [1], scale=2)
    b = KeypointSet.from_arrays([[1, 1]], [[1, 1]], [1], scale=4)
    with pytest.raises(ContractError):
        relocalize(KeypointSet.concat([a, b]))
    with pytest.raises(ContractError):
        relocalize(KeypointSet.from_arrays([[1, 1]], [[1, 1]], [1], scale=1))


@settings(max_examples=60, deadline=None)
@given(s=st.sampled_from([2, 4]),
       pts=st.lists(st.tuples(*[st.floats(0, 500, allow_nan=False)] * 4), max_size=20))
def test_relocalize_exactly_linear(s, pts):
    arr = np.array(pts, dtype=float).reshape(-1, 4)
    k = KeypointSet.from_arrays(arr[:, :2], arr[:, 2:], np.full(len(arr), 0.5), scale=s)
    r = relocalize(k)
    assert np.array_equal(r.t1, s * arr[:, :2]) and np.array_equal(r.t2, s * arr[:, 2:])


# ---------------------------------------------------------------- dedupe / hierarchy

def test_dedupe_keeps_higher_confidence():
    k = KeypointSet.from_arrays([[10, 10], [10.5, 10.2], [30, 30]],
                                [[12, 12], [12.3, 12.4], [30, 30]], [0.2, 0.9, 0.5])
    d = dedupe(k)
    assert len(d) == 2
    assert sorted(d.conf.tolist()) == [0.5, 0.9]


def test_dedupe_needs_both_endpoints_close():
    k = KeypointSet.from_arrays([[10, 10], [10.5, 10]], [[12, 12], [40, 40]], [0.2, 0.9])
    assert len(dedupe(k)) == 2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_dedupe_order_independent(seed):
    rng = np.random.default_rng(seed)
    n = 40
    t1 = rng.integers(0, 6, (n, 2)) + rng.random((n, 2)) * 0.5
    t2 = t1 + rng.integers(0, 2, (n, 2))
    conf = rng.integers(0, 4, n) / 4
    k = KeypointSet.from_arrays(t1, t2, conf)
    perm = rng.permutation(n)
    assert dedupe(k).to_json() == dedupe(k.take(perm)).to_json()
    kept = dedupe(k)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert (np.hypot(*(kept.t1[i] - kept.t1[j])) > 1 or np.hypot(*(kept.t2[i] - kept.t2[j])) > 1)


class _ScriptedMatcher:
    """Returns pre-set pairs keyed by the width of the image pair it is given."""

    def __init__(self, by_width):
        self.by_width = by_width

    def match(self, a, b):
        return self.by_width.get(a.width, KeypointSet.empty())


def _grid_pairs(n, offset, step):
    pts = np.array([[offset + step * i, offset + step * i] for i in range(n)], dtype=float)
    return KeypointSet.from_arrays(pts, pts + 1, np.full(n, 0.5))


def test_hierarchical_disjoint_union():
    img = textured(64, 64)
    plug = _ScriptedMatcher({64: _grid_pairs(5, 1, 3), 32: _grid_pairs(3, 10, 1), 16: _grid_pairs(2, 13, 1)})
    k = hierarchical_match(img, img, plug)
    assert len(k) == 10
    assert k.level_counts() == {1: 5, 2: 3, 4: 2}
    assert np.all(k.scale == 1)


def test_hierarchical_duplicate_counted_once():
    img = textured(64, 64)
    ori = KeypointSet.from_arrays([[20.0, 40.0]], [[22.0, 38.0]], [0.4])
    c1 = KeypointSet.from_arrays([[10.2, 20.1]], [[11.0, 19.0]], [0.8])
    k = hierarchical_match(img, img, _ScriptedMatcher({64: ori, 32: c1}))
    assert len(k) == 1
    assert k.conf[0] == 0.8 and k.level[0] == 2


def test_hierarchical_union_bound_and_accuracy():
    a = textured(256, 256, seed=21, sigma=2.0)
    t = np.deg2rad(4)
    h = np.array([[np.cos(t), -np.sin(t), 9], [np.sin(t), np.cos(t), -6], [1e-5, 0, 1]])
    b, _ = warp_raster(a, h, 256, 256)
    m = BuiltinMatcher()
    k = hierarchical_match(a, b, m)
    assert len(k) > 50
    err = np.hypot(*(project(h, k.t1) - k.t2).T)
    assert (err <= 3).mean() >= 0.8
    fa, fb = fused_pyramid(a, gaussian_bank()), fused_pyramid(b, gaussian_bank())
    total = len(m.match(a, b)) + len(m.match(fa[0], fb[0])) + len(m.match(fa[1], fb[1]))
    assert len(k) <= total


def test_hierarchical_workers_identical():
    a, b = textured(128, 128, seed=3), textured(128, 128, seed=3)
    assert hierarchical_match(a, b, workers=3).to_json() == hierarchical_match(a, b, workers=1).to_json()


# ---------------------------------------------------------------- subprocess plugin

def _plugin(tmp_path, body):
    script = tmp_path / "plugin.py"
    script.write_text(textwrap.dedent(body))
    return SubprocessMatcher([sys.executable, str(script)])


def test_subprocess_matcher_wire_format(tmp_path):
    plug = _plugin(tmp_path, """
        import json, sys
        from PIL import Image
        a, b, out = sys.argv[1:4]
        w, h = Image.open(a).size
        json.dump({"pairs": [{"t1": [1.5, 2.5], "t2": [w - 1, h - 1], "conf": 0.75, "scale": 1}]},
                  open(out, "w"))
    """)
    k = plug.match(textured(40, 30), textured(40, 30))
    assert k.pairs == [((1.5, 2.5), (39.0, 29.0))]
    assert k.conf.tolist() == [0.75]


def test_subprocess_matcher_failures(tmp_path):
    img = textured(40, 30)
    with pytest.raises(PluginError, match="status 3"):
        _plugin(tmp_path, "import sys; sys.exit(3)").match(img, img)
    with pytest.raises(PluginError, match="JSON"):
        _plugin(tmp_path, "pass").match(img, img)
    with pytest.raises(PluginError, match="outside"):
        _plugin(tmp_path, """
            import json, sys
            json.dump({"pairs": [{"t1": [99, 2], "t2": [1, 1], "conf": 1, "scale": 1}]}, open(sys.argv[3], "w"))
        """).match(img, img)
    with pytest.raises(PluginError, match="scale-1"):
        _plugin(tmp_path, """
            import json, sys
            json.dump({"pairs": [{"t1": [1, 2], "t2": [1, 1], "conf": 1, "scale": 2}]}, open(sys.argv[3], "w"))
        """).match(img, img)
    with pytest.raises(PluginError):
        SubprocessMatcher([str(tmp_path / "missing-binary")]).match(img, img)


def test_plugin_error_propagates_through_hierarchy(tmp_path):
    img = textured(64, 64)
    with pytest.raises(PluginError):
        hierarchical_match(img, img, _plugin(tmp_path, "import sys; sys.exit(1)"))
