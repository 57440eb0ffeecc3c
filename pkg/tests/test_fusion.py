import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereomosaic.core import CameraIntrinsics, RigidPose, backproject
from stereomosaic.fusion import FusionParams, SurfelCloud, color_weight, fuse_frame, rasterize
from stereomosaic.stereo import StereoCloud

K9 = CameraIntrinsics(10.0, 10.0, 4.0, 4.0, 9, 9)
I = RigidPose()


def sparse_cloud(k, pixels, depths, colors=None, normal=(0.0, 0.0, -1.0)):
    """Camera-frame cloud valid only at ``pixels`` (u, v) with the given depths along each ray."""
    pts = np.zeros((k.height, k.width, 3))
    valid = np.zeros((k.height, k.width), bool)
    col = np.zeros((k.height, k.width, 3), np.uint8)
    for i, ((u, v), z) in enumerate(zip(pixels, depths)):
        pts[v, u] = backproject(u, v, z, k)
        valid[v, u] = True
        if colors is not None:
            col[v, u] = colors[i]
    nrm = np.broadcast_to(np.asarray(normal, float), pts.shape).copy()
    return StereoCloud(pts, nrm, col, valid)


def test_rasterize_examples(backend):
    r = rasterize(SurfelCloud([[0.0, 0.0, 100.0]]), I, K9)
    assert r.ids[4, 4] == 0 and r.depth[4, 4] == 100.0
    assert r.covered.sum() == 1
    r = rasterize(SurfelCloud([[0.0, 0.0, 100.0], [0.0, 0.0, 50.0]]), I, K9)
    assert r.ids[4, 4] == 1 and r.depth[4, 4] == 50.0
    r = rasterize(SurfelCloud([[0.0, 0.0, -10.0]]), I, K9)
    assert not r.covered.any()
    r = rasterize(SurfelCloud([[0.0, 0.0, 30.0], [0.0, 0.0, 30.0]]), I, K9)
    assert r.ids[4, 4] == 0
    assert not rasterize(SurfelCloud(), I, K9).covered.any()


def test_rasterize_backends_agree(monkeypatch):
    from stereomosaic._accel import ENV_FLAG

    rng = np.random.default_rng(0)
    k = CameraIntrinsics(50.0, 50.0, 31.5, 23.5, 64, 48)
    pts = np.stack([rng.uniform(-80, 80, 5000), rng.uniform(-60, 60, 5000), rng.choice([40.0, 60.0, 80.0, -5.0], 5000)], 1)
    model = SurfelCloud(pts)
    pose = RigidPose.from_rotvec([0.05, -0.02, 0.01], [1.0, 2.0, 3.0])
    monkeypatch.setenv(ENV_FLAG, "1")
    a = rasterize(model, pose, k)
    monkeypatch.setenv(ENV_FLAG, "0")
    b = rasterize(model, pose, k)
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.depth, b.depth)
    # stored depth is the minimum over contenders
    z = pose.apply(pts)[:, 2]
    for v, u in zip(*np.nonzero(a.covered)):
        assert a.depth[v, u] == z[a.ids[v, u]]


def test_two_observations_average():
    model = SurfelCloud()
    fuse_frame(model, sparse_cloud(K9, [(4, 4)], [10.0]), I, K9)
    stats = fuse_frame(model, sparse_cloud(K9, [(4, 4)], [10.2]), I, K9)
    assert (stats.fused, stats.added) == (1, 0)
    assert len(model) == 1
    assert model.positions[0, 2] == pytest.approx(10.1, abs=1e-12)
    assert model.weights[0] == 2.0


def test_unassociated_pixels_append():
    model = SurfelCloud()
    fuse_frame(model, sparse_cloud(K9, [(4, 4)], [10.0]), I, K9)
    stats = fuse_frame(model, sparse_cloud(K9, [(4, 4), (1, 2)], [10.0, 12.0]), I, K9)
    assert (stats.fused, stats.added) == (1, 1)
    np.testing.assert_allclose(model.positions[1], backproject(1, 2, 12.0, K9))
    # outside the gate: a second surfel on the same ray
    stats = fuse_frame(model, sparse_cloud(K9, [(4, 4)], [30.0]), I, K9)
    assert (stats.fused, stats.added) == (0, 1) and len(model) == 3


def test_truncated_increment():
    model = SurfelCloud([[0.0, 0.0, 10.0]])
    p = FusionParams(trunc=0.5, association_gate=5.0)
    fuse_frame(model, sparse_cloud(K9, [(4, 4)], [14.0]), I, K9, p)
    assert model.positions[0, 2] == pytest.approx(10.25)


def test_center_color_weight_larger():
    k = CameraIntrinsics(100.0, 100.0, 49.5, 39.5, 100, 80)
    assert color_weight(49.5, 39.5, k) == 1.0
    assert color_weight(50, 40, k) > color_weight(0, 40, k) > color_weight(0, 0, k)
    assert color_weight(0, 0, k) == pytest.approx(0.1)
    model = SurfelCloud()
    fuse_frame(model, sparse_cloud(k, [(50, 40), (1, 1)], [50.0, 50.0], [(200, 10, 10), (200, 10, 10)]), I, k)
    center = int(np.argmin(np.abs(model.positions[:, 0])))
    assert model.color_weights[center] > model.color_weights[1 - center]
    # the center surfel seen again near a corner of a shifted view: small pull toward the new color
    p = model.positions[center]
    shifted = RigidPose(translation=[-24.5 - p[0] + 0.25, -19.5 - p[1] + 0.25, 0.0])
    w0, w1 = color_weight(50, 40, k), color_weight(1, 1, k)
    fuse_frame(model, sparse_cloud(k, [(1, 1)], [50.0], [(0, 0, 0)]), shifted, k)
    assert model.weights[center] == 2.0
    assert model.colors[center, 0] == pytest.approx(200.0 * w0 / (w0 + w1))
    assert model.colors[center, 0] > 150.0


def test_fused_normals_unit():
    model = SurfelCloud()
    fuse_frame(model, sparse_cloud(K9, [(4, 4)], [10.0]), I, K9)
    n = np.array([0.3, 0.0, -1.0]) / np.linalg.norm([0.3, 0.0, -1.0])
    fuse_frame(model, sparse_cloud(K9, [(4, 4)], [10.0], normal=n), I, K9)
    assert np.linalg.norm(model.normals[0]) == pytest.approx(1.0, abs=1e-12)
    assert 0 < model.normals[0, 0] < n[0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3), st.integers(0, 2))
def test_merge_order_independent(offsets, which):
    zs = [50.0 + o for o in offsets]
    first = [zs[0], zs[which]] if which else [zs[0], zs[1]]
    rest = [z for i, z in enumerate(zs) if i not in ((0, which) if which else (0, 1))]
    a = SurfelCloud()
    for z in zs:
        fuse_frame(a, sparse_cloud(K9, [(4, 4)], [z]), I, K9)
    b = SurfelCloud()
    for z in first + rest:
        fuse_frame(b, sparse_cloud(K9, [(4, 4)], [z]), I, K9)
    np.testing.assert_allclose(a.positions, b.positions, atol=1e-9)
    assert a.weights[0] == b.weights[0] == 3.0


def test_count_invariant_and_weight_cap():
    rng = np.random.default_rng(1)
    model = SurfelCloud()
    params = FusionParams(weight_cap=50.0)
    for i in range(60):
        n_before = len(model)
        pix = [(int(u), int(v)) for u, v in zip(rng.integers(0, 9, 6), rng.integers(0, 9, 6))]
        pix = list(dict.fromkeys(pix))
        depths = rng.uniform(20.0, 22.0, len(pix))
        ids = rasterize(model, I, K9).ids
        z_ras = rasterize(model, I, K9).depth
        expect_new = sum(1 for (u, v), z in zip(pix, depths) if ids[v, u] < 0 or abs(z_ras[v, u] - z) > params.association_gate)
        stats = fuse_frame(model, sparse_cloud(K9, pix, depths), I, K9, params)
        assert len(model) - n_before == expect_new == stats.added
        assert np.all(model.weights <= 50.0) and np.all(model.color_weights <= 50.0)
    repeat = SurfelCloud()
    for _ in range(60):
        fuse_frame(repeat, sparse_cloud(K9, [(4, 4)], [20.0]), I, K9, params)
    assert repeat.weights[0] == 50.0


def test_surfel_cloud_validation():
    with pytest.raises(ValueError):
        SurfelCloud([[0, 0, 1]], normals=[[0, 0, 2.0]])
    with pytest.raises(ValueError):
        SurfelCloud([[0, 0, 1]], weights=[-1.0])
    with pytest.raises(ValueError):
        fuse_frame(SurfelCloud(), sparse_cloud(K9, [], []), I, CameraIntrinsics(10, 10, 5, 5, 11, 11))


def test_monte_carlo_sixteen_observations():
    rng = np.random.default_rng(2)
    k = CameraIntrinsics(400.0, 400.0, 199.5, 199.5, 400, 400)
    sigma, n, reps = 0.5, 16, 1000
    grid = [(int(u), int(v)) for v in range(5, 400, 12) for u in range(5, 400, 12)][:reps]
    model = SurfelCloud()
    for _ in range(n):
        fuse_frame(model, sparse_cloud(k, grid, 100.0 + rng.normal(0.0, sigma, reps)), I, k)
    assert len(model) == reps
    err = model.positions[:, 2] - 100.0
    assert err.std() <= 2 * sigma / np.sqrt(n)
