import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SCENE_NORMAL_WINDOW, TOY_THRESHOLD
from oracles import record_oracle, score_oracle, template_features
from pcofmod.errors import InvalidArgumentError
from pcofmod.evalkit import place_on_ray, synth_scene
from pcofmod.features import build_feature_pyramid
from pcofmod.matcher import (
    BLOCK, LANES, Detection, _run_blocks_naive, _run_blocks_rearranged, combined_score, detect, nms,
    pack_templates, rearrange, score_block, score_block_naive, score_naive,
)
from pcofmod.templates import Template, TemplatePair

GRID_LEAF = 37  # a leaf whose viewpoint is interior to the toy range


def tmpl(features, modality="gradient"):
    x, y, o, w = zip(*features) if features else ((), (), (), ())
    return Template(np.array(x), np.array(y), np.array(o), np.array(w), modality)


# --------------------------------------------------------------------------
# scoring


def test_full_match_scores_one():
    t = tmpl([(0, 0, 0b1, 10), (1, 0, 0b100, 20), (0, 1, 0b10000000, 5)])
    omap = np.zeros((5, 5), np.uint8)
    omap[2, 2], omap[2, 3], omap[3, 2] = 0b1, 0b110, 0b10000001
    assert score_naive(t, omap, 2, 2) == 1.0


def test_disjoint_masks_score_zero():
    t = tmpl([(0, 0, 0b1, 10), (1, 0, 0b100, 20)])
    omap = np.full((5, 5), 0b11111010, np.uint8)
    assert score_naive(t, omap, 1, 1) == 0.0


def test_weighted_partial_match():
    t = tmpl([(0, 0, 0b1, 30), (1, 0, 0b1, 10)])
    omap = np.zeros((3, 3), np.uint8)
    omap[1, 1] = 0b1
    assert score_naive(t, omap, 1, 1) == pytest.approx(0.75)


def test_features_outside_the_image_do_not_match():
    t = tmpl([(-2, 0, 0b1, 1), (0, 0, 0b1, 1), (5, 5, 0b1, 1)])
    omap = np.full((4, 4), 0xFF, np.uint8)
    assert score_naive(t, omap, 0, 0) == pytest.approx(1 / 3)
    assert score_naive(t, omap, -10, -10) == 0.0


def test_combined_score_is_the_mean():
    tg = tmpl([(0, 0, 1, 1)])
    tn = tmpl([(0, 0, 2, 1), (1, 0, 2, 1)], "normal")
    g = np.ones((2, 2), np.uint8)
    n = np.array([[2, 0], [0, 0]], np.uint8)
    assert combined_score(tg, tn, g, n, 0, 0) == pytest.approx(0.75)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), nfeat=st.integers(0, 40))
def test_score_matches_oracle(seed, nfeat):
    rng = np.random.default_rng(seed)
    omap = rng.integers(0, 256, (20, 24), dtype=np.uint8) & rng.integers(0, 256, (20, 24), dtype=np.uint8)
    feats = [(int(rng.integers(-6, 7)), int(rng.integers(-6, 7)), 1 << int(rng.integers(8)), int(rng.integers(1, 300)))
             for _ in range(nfeat)]
    x, y = int(rng.integers(-3, 27)), int(rng.integers(-3, 23))
    assert score_naive(tmpl(feats), omap, x, y) == score_oracle(feats, omap, x, y)


# --------------------------------------------------------------------------
# rearranged map


def test_record_layout_on_small_map():
    g = np.arange(100, dtype=np.uint8).reshape(10, 10)
    n = (g + 100).astype(np.uint8)
    rm = rearrange(g, n)
    assert rm.records.shape == (10, 10, 32)
    assert rm.nbytes == 32 * 10 * 10
    assert rm.records[0, 0].tolist() == [0, 1, 2, 3, 10, 11, 12, 13, 20, 21, 22, 23, 30, 31, 32, 33,
                                         100, 101, 102, 103, 110, 111, 112, 113, 120, 121, 122, 123, 130, 131,
                                         132, 133]
    for x, y in [(9, 9), (7, 3), (8, 0), (0, 8)]:
        assert rm.records[y, x].tolist() == record_oracle(g, n, x, y)


def test_all_zero_maps_give_zero_records():
    rm = rearrange(np.zeros((7, 9), np.uint8), np.zeros((7, 9), np.uint8))
    assert not rm.records.any()


def test_random_records_match_oracle(rng):
    g = rng.integers(0, 256, (37, 53), dtype=np.uint8)
    n = rng.integers(0, 256, (37, 53), dtype=np.uint8)
    rm = rearrange(g, n)
    for _ in range(1000):
        x, y = int(rng.integers(53)), int(rng.integers(37))
        assert rm.records[y, x].tolist() == record_oracle(g, n, x, y)


def test_rearrange_size_mismatch():
    with pytest.raises(InvalidArgumentError):
        rearrange(np.zeros((4, 4), np.uint8), np.zeros((4, 5), np.uint8))


def test_rearranged_map_is_32_bytes_per_pixel():
    rm = rearrange(np.zeros((480, 640), np.uint8), np.zeros((480, 640), np.uint8))
    assert rm.nbytes == 32 * 640 * 480


# --------------------------------------------------------------------------
# block scoring

feature = st.tuples(st.integers(-9, 9), st.integers(-9, 9), st.integers(1, 255), st.integers(1, 65535))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), fg=st.lists(feature, min_size=1, max_size=30),
       fn=st.lists(feature, min_size=1, max_size=30), bx=st.integers(-3, 6), by=st.integers(-3, 5))
def test_block_equals_naive(seed, fg, fn, bx, by):
    rng = np.random.default_rng(seed)
    # keep one feature per pixel and modality
    fg = list({(f[0], f[1]): f for f in fg}.values())
    fn = list({(f[0], f[1]): f for f in fn}.values())
    g = rng.integers(0, 256, (22, 26), dtype=np.uint8) & rng.integers(0, 256, (22, 26), dtype=np.uint8)
    n = rng.integers(0, 256, (22, 26), dtype=np.uint8) & rng.integers(0, 256, (22, 26), dtype=np.uint8)
    tg, tn = tmpl(fg), tmpl(fn, "normal")
    x, y = BLOCK * bx, BLOCK * by
    fast = score_block(tg, tn, rearrange(g, n), x, y)
    slow = score_block_naive(tg, tn, g, n, x, y)
    assert fast.tobytes() == slow.tobytes()


def test_large_weights_do_not_overflow():
    # enough maximal weights to force several flushes of the 16-bit lanes
    feats = [(dx, dy, 0xFF, 65535) for dx in range(-5, 6) for dy in range(-5, 6)]
    tg, tn = tmpl(feats), tmpl(feats[:7], "normal")
    g = np.full((16, 16), 0xFF, np.uint8)
    n = np.full((16, 16), 0x0F, np.uint8)
    fast = score_block(tg, tn, rearrange(g, n), 4, 4)
    slow = score_block_naive(tg, tn, g, n, 4, 4)
    assert fast.tobytes() == slow.tobytes()
    assert fast[3, 3] == 1.0  # anchor (7, 7): every feature inside the map


def test_zero_maps_give_zero_block():
    t = tmpl([(0, 0, 1, 5), (2, 1, 8, 3)])
    z = np.zeros((8, 8), np.uint8)
    assert not score_block(t, tmpl([(1, 1, 2, 4)], "normal"), rearrange(z, z), 0, 0).any()


def test_single_feature_block():
    tg = tmpl([(1, 0, 0b10, 7)])
    tn = tmpl([(0, 0, 0b1, 1)], "normal")
    g = np.zeros((8, 8), np.uint8)
    g[2, 3] = 0b10
    out = score_block(tg, tn, rearrange(g, np.zeros_like(g)), 0, 0)
    expect = np.zeros((4, 4))
    expect[2, 2] = 0.5
    np.testing.assert_array_equal(out, expect)


def test_block_must_be_aligned():
    t = tmpl([(0, 0, 1, 1)])
    z = rearrange(np.zeros((8, 8), np.uint8), np.zeros((8, 8), np.uint8))
    with pytest.raises(InvalidArgumentError):
        score_block(t, t, z, 2, 0)


def test_pack_rejects_oversized_weights():
    t = Template(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(1), "gradient")
    t.w = np.array([70000], dtype=np.int64)
    with pytest.raises(InvalidArgumentError):
        pack_templates([TemplatePair(t, t)])


def _all_blocks(packed, level_map, nodes):
    h, w = level_map.shape
    return np.array([(k, bx, by) for k in nodes for by in range(0, h, BLOCK) for bx in range(0, w, BLOCK)],
                    dtype=np.int64)


def test_block_kernel_is_faster_than_per_anchor_scoring(toy_tree):
    gray, depth, _ = synth_scene([(toy_tree.mesh, toy_tree.node_pose(3, GRID_LEAF))], toy_tree.intrinsics)
    pyr = build_feature_pyramid(gray, depth, toy_tree.intrinsics)
    g, n = pyr.gradient[0], pyr.normal[0]
    P = pack_templates(toy_tree.pairs[3])
    nodes = [k for k in range(len(toy_tree.pairs[3])) if len(toy_tree.pairs[3][k].grad) >= 50][:8]
    assert nodes
    tasks = _all_blocks(P, g, nodes)
    out_fast = np.empty((len(tasks), LANES))
    out_slow = np.empty((len(tasks), LANES))
    rm = rearrange(g, n)

    def fast():
        _run_blocks_rearranged(tasks, P.m_start, P.mx, P.my, P.mog, P.mwg, P.mon, P.mwn, P.tot_g, P.tot_n,
                               rm.words, g, n, out_fast)

    def slow():
        _run_blocks_naive(tasks, P.g_start, P.gx, P.gy, P.go, P.gw, P.n_start, P.nx, P.ny, P.no, P.nw,
                          P.tot_g, P.tot_n, g, n, out_slow)

    fast(), slow()  # compile
    tf, ts = [], []
    for _ in range(5):
        t0 = time.perf_counter()
        fast()
        t1 = time.perf_counter()
        slow()
        t2 = time.perf_counter()
        tf.append(t1 - t0)
        ts.append(t2 - t1)
    assert out_fast.tobytes() == out_slow.tobytes()
    assert np.median(ts) >= 2.0 * np.median(tf)


# --------------------------------------------------------------------------
# detection


def _pyramid(tree, objects, **scene):
    gray, depth, _ = synth_scene([(tree.mesh, p) for p in objects], tree.intrinsics, **scene)
    return build_feature_pyramid(gray, depth, tree.intrinsics, normal_window=SCENE_NORMAL_WINDOW)


@pytest.fixture(scope="module")
def grid_scene(toy_tree):
    return _pyramid(toy_tree, [toy_tree.node_pose(3, GRID_LEAF)])


def test_clean_render_of_a_leaf_is_detected(toy_tree, grid_scene):
    dets = detect(grid_scene, toy_tree, TOY_THRESHOLD)
    ax, ay = toy_tree.anchor(0)
    assert dets
    # the best hit may be a neighbouring view on the same object, a few pixels away
    top = dets[0]
    assert abs(top.x - ax) <= 6 and abs(top.y - ay) <= 6
    gt = [d for d in dets if d.node == GRID_LEAF]
    assert gt and min(abs(d.x - ax) + abs(d.y - ay) for d in gt) <= 2
    assert all(d.score >= TOY_THRESHOLD for d in dets)
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)


def test_empty_scene_has_no_detections(toy_tree):
    assert detect(_pyramid(toy_tree, []), toy_tree, TOY_THRESHOLD) == []


def test_two_instances_survive_suppression(toy_tree):
    K = toy_tree.intrinsics
    base = toy_tree.node_pose(3, GRID_LEAF)
    left = place_on_ray(base, K, K.cx - 90, K.cy)
    right = place_on_ray(base, K, K.cx + 90, K.cy)
    dets = nms(detect(_pyramid(toy_tree, [left, right]), toy_tree, TOY_THRESHOLD), 60)
    assert len(dets) == 2
    xs = sorted(d.x for d in dets)
    assert abs(xs[0] - (K.cx - 90)) < 8 and abs(xs[1] - (K.cx + 90)) < 8


def test_raising_the_threshold_only_removes_detections(toy_tree, grid_scene):
    prev = None
    for thr in (0.35, 0.4, 0.45, 0.5, 0.55, 0.6):
        cur = {(d.node, d.x, d.y) for d in detect(grid_scene, toy_tree, thr)}
        if prev is not None:
            assert cur <= prev
        prev = cur
    assert not prev


def test_rearranged_and_naive_search_agree(toy_tree, grid_scene):
    a = detect(grid_scene, toy_tree, TOY_THRESHOLD, rearranged=True)
    b = detect(grid_scene, toy_tree, TOY_THRESHOLD, rearranged=False)
    assert [(d.node, d.x, d.y, d.score) for d in a] == [(d.node, d.x, d.y, d.score) for d in b]


def test_detection_is_deterministic(toy_tree):
    pose = place_on_ray(toy_tree.node_pose(3, 120), toy_tree.intrinsics, 300.0, 260.0)
    key = lambda ds: [(d.node, d.x, d.y, d.score) for d in ds]  # noqa: E731
    a = detect(_pyramid(toy_tree, [pose], noise_sigma=2.0, seed=4), toy_tree, TOY_THRESHOLD)
    b = detect(_pyramid(toy_tree, [pose], noise_sigma=2.0, seed=4), toy_tree, TOY_THRESHOLD)
    assert key(a) == key(b)


@pytest.mark.parametrize("thr", [0.0, -0.1, 1.01])
def test_threshold_must_be_a_fraction(toy_tree, grid_scene, thr):
    with pytest.raises(InvalidArgumentError):
        detect(grid_scene, toy_tree, thr)


def test_detections_carry_an_initial_pose(toy_tree, grid_scene):
    d = detect(grid_scene, toy_tree, TOY_THRESHOLD)[0]
    assert d.pose is not None
    R = d.pose.R
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)


# --------------------------------------------------------------------------
# non-maximum suppression


def D(x, y, s, node=0):
    return Detection(x, y, node, s)


def test_nms_keeps_the_best_of_a_cluster():
    kept = nms([D(10, 10, 0.5), D(12, 10, 0.9), D(40, 40, 0.6)], 5)
    assert [(d.x, d.y) for d in kept] == [(12, 10), (40, 40)]


def test_nms_boundary_is_inclusive():
    assert len(nms([D(0, 0, 0.9), D(5, 0, 0.8)], 5)) == 1
    assert len(nms([D(0, 0, 0.9), D(6, 0, 0.8)], 5)) == 2


def test_nms_tie_break_is_deterministic():
    a = nms([D(3, 1, 0.7, 2), D(1, 1, 0.7, 5), D(1, 1, 0.7, 1)], 1)
    assert [(d.x, d.node) for d in a] == [(1, 1), (3, 2)]


def test_nms_radius_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        nms([], 0)


def test_oracle_helpers_agree_with_templates(toy_tree, grid_scene):
    pair = toy_tree.pairs[3][GRID_LEAF]
    ax, ay = toy_tree.anchor(0)
    g = grid_scene.gradient[0]
    assert score_naive(pair.grad, g, ax, ay) == score_oracle(template_features(pair.grad), g, ax, ay)
