import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from binpick.fusion import (
    DegenerateCloud,
    DepthImage,
    FusionConfig,
    ViewSet,
    _insert_samples,
    fuse,
    fuse_detailed,
    icp_align,
    icp_register,
    image_points,
    reproject_into_target,
    to_robot_frame,
)
from binpick.geometry import Intrinsics, Pose, rot_x, rot_z

from .oracles import rodrigues

NO_ICP = FusionConfig(icp_enabled=False)


def const_image(value, w=8, h=6):
    return DepthImage(np.full((h, w), float(value)), np.ones((h, w), dtype=bool))


def small_k(w=8, h=6, f=10.0):
    return Intrinsics(f, f, w / 2, h / 2, w, h)


# --- DepthImage ---------------------------------------------------------------

def test_invalid_pixels_hold_zero_and_bad_depths_are_invalid():
    d = np.array([[1.0, np.nan], [-2.0, 5.0]])
    img = DepthImage(d, np.array([[True, True], [True, False]]))
    assert img.valid.tolist() == [[True, False], [False, False]]
    assert img.depth.tolist() == [[1.0, 0.0], [0.0, 0.0]]
    assert img.invalid_fraction() == 0.75


def test_from_array_treats_nonpositive_as_holes():
    img = DepthImage.from_array([[0.0, 3.0], [np.inf, 2.0]])
    assert img.valid.tolist() == [[False, True], [False, True]]


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        DepthImage(np.zeros((2, 2)), np.zeros((2, 3), dtype=bool))
    with pytest.raises(ValueError):
        ViewSet([(const_image(1.0, 4, 4), Pose())], small_k())
    with pytest.raises(ValueError):
        ViewSet([], small_k())
    with pytest.raises(ValueError):
        ViewSet([(const_image(1.0), Pose())], small_k(), reference_index=1)


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(delta=0.0)
    with pytest.raises(ValueError):
        FusionConfig(icp_max_iterations=0)
    assert FusionConfig.for_sensor_accuracy(1.0).delta == 2.0


# --- reprojection ------------------------------------------------------------

def test_reproject_same_pose_is_identity():
    k = small_k()
    rng = np.random.default_rng(0)
    depth = rng.uniform(200, 400, (6, 8))
    valid = rng.random((6, 8)) > 0.3
    img = DepthImage(depth, valid)
    pose = Pose(rot_z(0.3), (5.0, 1.0, 2.0))
    rep = reproject_into_target(img, pose, pose, k)
    dense = rep.dense(8, 6)
    assert np.array_equal(np.isfinite(dense), img.valid)
    np.testing.assert_allclose(dense[img.valid], depth[img.valid], rtol=0, atol=1e-9)
    assert rep.dropped == 0


def test_reproject_z_translation_moves_pixels_outward():
    # three pixels of a 9x9 image at depth 100; target camera 10 mm closer
    k = Intrinsics(10.0, 10.0, 4.0, 4.0, 9, 9)
    depth = np.zeros((9, 9))
    valid = np.zeros((9, 9), dtype=bool)
    for u, v in [(4, 4), (6, 4), (4, 2)]:
        depth[v, u], valid[v, u] = 100.0, True
    rep = reproject_into_target(DepthImage(depth, valid), Pose(), Pose(np.eye(3), (0, 0, 10.0)), k)
    got = {tuple(p): d for p, d in zip(rep.pixels.tolist(), rep.depth)}
    # (u - cx) scales by 100 / 90: 2 -> 2.22 rounds to 2, so pixel offsets survive at this size
    assert got == {(4, 4): 90.0, (6, 4): 90.0, (4, 2): 90.0}
    # with a larger offset the radial spread becomes visible: 4 * 100 / 50 = 8
    depth2 = np.zeros((9, 9))
    valid2 = np.zeros((9, 9), dtype=bool)
    depth2[4, 6], valid2[4, 6] = 100.0, True
    rep2 = reproject_into_target(DepthImage(depth2, valid2), Pose(), Pose(np.eye(3), (0, 0, 50.0)), k)
    assert rep2.pixels.tolist() == [[8, 4]] and rep2.depth.tolist() == [50.0]


def test_reproject_drops_out_of_frame_and_behind():
    k = small_k()
    img = const_image(100.0)
    behind = reproject_into_target(img, Pose(), Pose(np.eye(3), (0, 0, 200.0)), k)
    assert len(behind) == 0 and behind.dropped == img.valid.sum()
    side = reproject_into_target(img, Pose(), Pose(np.eye(3), (1000.0, 0, 0)), k)
    assert len(side) == 0 and side.dropped == img.valid.sum()


def test_reproject_empty_source():
    rep = reproject_into_target(DepthImage.empty(8, 6), Pose(), Pose(), small_k())
    assert len(rep) == 0 and rep.dropped == 0


def test_reproject_keeps_nearest_on_collision():
    # two source pixels that both round to target pixel 4 once the target backs off 900 mm
    k = Intrinsics(10.0, 10.0, 4.0, 0.0, 9, 1)
    depth = np.zeros((1, 9))
    depth[0, 4], depth[0, 5] = 100.0, 50.0
    img = DepthImage(depth, depth > 0)
    rep = reproject_into_target(img, Pose(), Pose(np.eye(3), (0, 0, -900.0)), k)
    assert rep.pixels.tolist() == [[4, 0]]
    assert rep.depth.tolist() == [950.0]


# --- ICP ---------------------------------------------------------------------

def _cloud(seed=0, n=600):
    rng = np.random.default_rng(seed)
    # non-planar surface patch with enough structure to pin all six dof
    xy = rng.uniform(-50, 50, (n, 2))
    z = 300 + 10 * np.sin(xy[:, 0] / 12) + 8 * np.cos(xy[:, 1] / 9)
    return np.column_stack([xy, z])


def test_icp_fixed_point():
    c = _cloud()
    res = icp_register(c, c, Pose(), FusionConfig())
    assert res.pose.almost_equal(Pose(), 1e-9)
    assert res.final_rms == pytest.approx(0.0, abs=1e-9)


def test_icp_recovers_one_mm_translation():
    c = _cloud()
    moved = c + np.array([1.0, 0.0, 0.0])
    pose = icp_align(c, moved, Pose(), FusionConfig(icp_convergence=1e-4, icp_max_iterations=50))
    np.testing.assert_allclose(pose.translation, [1.0, 0.0, 0.0], atol=0.01)


def test_icp_degenerate_inputs():
    c = _cloud()
    with pytest.raises(DegenerateCloud):
        icp_align(c[:2], c, Pose(), FusionConfig())
    line = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateCloud):
        icp_align(line, c, Pose(), FusionConfig())


@given(st.integers(0, 10_000), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-0.01, 0.01))
def test_icp_never_increases_residual(seed, tx, ty, tz, ang):
    c = _cloud(seed, 300)
    target = Pose(rodrigues((0.3, 1.0, 0.2), ang), (tx, ty, tz)).apply(c)
    res = icp_register(c, target, Pose(), FusionConfig())
    assert res.final_rms <= res.initial_rms + 1e-12


# --- candidate bookkeeping -----------------------------------------------------

def _run_cells(samples_per_view, delta):
    n = len(samples_per_view)
    m = len(samples_per_view[0])
    means = np.zeros((n, m))
    votes = np.zeros((n, m), dtype=np.int64)
    count = np.zeros(m, dtype=np.intp)
    for s in samples_per_view:
        _insert_samples(means, votes, count, np.asarray(s, dtype=float), delta)
    return means, votes


def test_worked_cell_cluster_beats_outlier():
    views = [(DepthImage(np.array([[d]]), np.array([[True]])), Pose()) for d in (299.0, 301.0, 300.0, 350.0)]
    res = fuse_detailed(ViewSet(views, Intrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)), FusionConfig(delta=4.0,
                                                                                            icp_enabled=False))
    assert res.image.depth[0, 0] == pytest.approx(300.0, abs=1e-12)
    assert res.votes[0, 0] == 3


@given(st.lists(st.lists(st.one_of(st.none(), st.floats(100, 140)), min_size=3, max_size=3),
                min_size=1, max_size=6),
       st.floats(0.5, 8.0))
def test_candidates_stay_separated_and_votes_conserved(rows, delta):
    samples = [[np.nan if x is None else x for x in row] for row in rows]
    means, votes = _run_cells(samples, delta)
    for p in range(3):
        live = means[votes[:, p] > 0, p]
        assert (votes[:, p] >= 0).all()
        for i in range(len(live)):
            for j in range(i + 1, len(live)):
                assert abs(live[i] - live[j]) >= delta
        assert votes[:, p].sum() == sum(np.isfinite(row[p]) for row in samples)


# --- fuse ----------------------------------------------------------------------

def _noisy_views(seed=0, n=4, w=16, h=12):
    rng = np.random.default_rng(seed)
    base = rng.uniform(250, 350, (h, w))
    return base, [DepthImage(base, rng.random((h, w)) > 0.3) for _ in range(n)]


def test_single_view_passthrough():
    base, views = _noisy_views(n=1)
    k = small_k(16, 12)
    out = fuse(ViewSet([(views[0], Pose(rot_x(0.1), (1, 2, 3)))], k), FusionConfig())
    assert out.equals(views[0])


def test_identical_views_give_input_with_full_votes():
    k = small_k(16, 12)
    img = DepthImage(np.random.default_rng(1).uniform(250, 350, (12, 16)), np.ones((12, 16), dtype=bool))
    pose = Pose(rot_z(0.2), (3.0, 4.0, 5.0))
    res = fuse_detailed(ViewSet([(img, pose)] * 4, k), NO_ICP)
    assert res.image.equals(img)
    assert (res.votes == 4).all()


def test_identical_views_with_icp_enabled_are_idempotent():
    k = Intrinsics(40.0, 40.0, 20.0, 15.0, 40, 30)
    u, v = np.meshgrid(np.arange(40), np.arange(30))
    depth = 300 + 15 * np.sin(u / 5.0) + 10 * np.cos(v / 4.0)
    img = DepthImage(depth, np.ones_like(depth, dtype=bool))
    res = fuse_detailed(ViewSet([(img, Pose())] * 3, k), FusionConfig())
    assert res.image.equals(img)


def test_hole_filling_same_pose():
    base, views = _noisy_views(seed=2)
    k = small_k(16, 12)
    res = fuse(ViewSet([(v, Pose()) for v in views], k), NO_ICP)
    any_valid = np.logical_or.reduce([v.valid for v in views])
    assert np.array_equal(res.valid, any_valid)
    np.testing.assert_allclose(res.depth[any_valid], base[any_valid])


def test_outlier_suppressed_with_two_votes():
    k = small_k()
    rng = np.random.default_rng(3)
    clean = np.full((6, 8), 300.0)
    views = []
    outliers = set()
    for i in range(4):
        d = clean + rng.normal(0, 0.2, clean.shape)
        idx = rng.choice(48, 5, replace=False)
        flat = d.reshape(-1)
        flat[idx] += 40.0 + i
        outliers.update(float(x) for x in flat[idx])
        views.append((DepthImage(d, np.ones_like(d, dtype=bool)), Pose()))
    out = fuse(ViewSet(views, k), FusionConfig(icp_enabled=False, min_votes=2))
    assert out.valid.all()
    assert not set(out.depth.reshape(-1).tolist()) & outliers
    assert np.abs(out.depth - 300.0).max() < 1.0


@given(st.integers(0, 10_000), st.permutations(range(4)))
def test_well_separated_clusters_are_order_invariant(seed, order):
    rng = np.random.default_rng(seed)
    h, w, delta = 4, 5, 2.0
    layers = np.array([200.0, 210.0, 230.0])
    views = []
    for _ in range(4):
        layer = layers[rng.integers(0, 3, (h, w))]
        d = layer + rng.uniform(-delta / 4, delta / 4, (h, w))
        views.append(DepthImage(d, rng.random((h, w)) > 0.2))
    k = small_k(w, h)
    a = fuse(ViewSet([(v, Pose()) for v in views], k), FusionConfig(delta=delta, icp_enabled=False))
    perm = [views[i] for i in order]
    b = fuse(ViewSet([(v, Pose()) for v in perm], k), FusionConfig(delta=delta, icp_enabled=False))
    assert np.array_equal(a.valid, b.valid)
    np.testing.assert_allclose(a.depth, b.depth, atol=1e-9)


def test_degenerate_view_is_skipped_with_warning(caplog):
    k = Intrinsics(40.0, 40.0, 20.0, 15.0, 40, 30)
    u, v = np.meshgrid(np.arange(40), np.arange(30))
    img = DepthImage(300 + 10 * np.sin(u / 5.0) + 5 * np.cos(v / 3.0), np.ones((30, 40), dtype=bool))
    sparse = np.zeros((30, 40), dtype=bool)
    sparse[3, 4] = True
    bad = DepthImage(np.full((30, 40), 300.0), sparse)
    with caplog.at_level(logging.WARNING, logger="binpick.fusion"):
        res = fuse_detailed(ViewSet([(img, Pose()), (bad, Pose()), (img, Pose())], k), FusionConfig())
    assert res.skipped_views == [1]
    assert "skipped" in caplog.text
    assert res.image.equals(img)


def test_fusion_is_deterministic():
    base, views = _noisy_views(seed=5)
    k = small_k(16, 12)
    vs = ViewSet([(v, Pose(rot_z(0.01 * i), (0.5 * i, 0, 0))) for i, v in enumerate(views)], k)
    assert fuse(vs, NO_ICP).equals(fuse(vs, NO_ICP))


# --- robot frame -----------------------------------------------------------------

def test_to_robot_frame_identity_matches_backprojection():
    k = small_k()
    img = const_image(250.0)
    np.testing.assert_allclose(to_robot_frame(img, k, Pose()), image_points(img, k))


def test_to_robot_frame_empty():
    assert to_robot_frame(DepthImage.empty(8, 6), small_k(), Pose()).shape == (0, 3)


def test_to_robot_frame_center_pixel():
    k = Intrinsics(10.0, 10.0, 3.0, 2.0, 8, 6)
    depth = np.zeros((6, 8))
    valid = np.zeros((6, 8), dtype=bool)
    depth[2, 3], valid[2, 3] = 300.0, True
    pose = Pose(rot_x(np.pi / 2), (10.0, 20.0, 30.0))
    pts = to_robot_frame(DepthImage(depth, valid), k, pose)
    # Rx(90) (0, 0, 300) = (0, -300, 0)
    np.testing.assert_allclose(pts, [[10.0, -280.0, 30.0]], atol=1e-9)
