import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lras import geometry as geo
from lras import microworld as mw


K32 = geo.CameraIntrinsics(32.0, 32.0, 32.0, 32.0)


def test_unproject_principal_point():
    depth = np.full((65, 65), 3.0)
    pts = geo.unproject(depth, K32)
    np.testing.assert_allclose(pts[32, 32], [0.0, 0.0, 3.0])


def test_unproject_off_axis_example():
    depth = np.full((65, 65), 4.0)
    pts = geo.unproject(depth, K32)
    # pixel (u=48, v=32): (48-32)/32*4 = 2
    np.testing.assert_allclose(pts[32, 48], [2.0, 0.0, 4.0])


def test_project_unproject_identity():
    rng = np.random.default_rng(0)
    depth = rng.uniform(1.0, 9.0, size=(16, 16))
    K = geo.CameraIntrinsics(20.0, 24.0, 7.5, 7.5)
    uv = geo.project(geo.unproject(depth, K), K)
    v, u = np.mgrid[0:16, 0:16]
    np.testing.assert_allclose(uv[..., 0], u, atol=1e-12)
    np.testing.assert_allclose(uv[..., 1], v, atol=1e-12)


def test_unproject_rejects_nonpositive_depth():
    with pytest.raises(ValueError, match="positive"):
        geo.unproject(np.zeros((4, 4)), K32)


def test_flow_from_camera_identity_zero():
    depth = np.full((8, 8), 2.0)
    fl = geo.flow_from_camera(depth, K32, geo.RigidTransform.identity())
    np.testing.assert_array_equal(fl.uv, 0.0)
    assert fl.valid.all()


def test_flow_from_camera_inplane_translation():
    depth = np.full((16, 16), 5.0)
    K = geo.CameraIntrinsics(16.0, 16.0, 7.5, 7.5)
    ty = 0.5
    fl = geo.flow_from_camera(depth, K, geo.RigidTransform(np.eye(3), [0, ty, 0]))
    np.testing.assert_allclose(fl.uv[..., 1], K.fy * ty / 5.0, atol=1e-12)
    np.testing.assert_allclose(fl.uv[..., 0], 0.0, atol=1e-12)


def test_flow_from_object_background_exact_zero():
    depth = np.full((16, 16), 2.0)
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:9, 5:10] = True
    K = geo.CameraIntrinsics(16.0, 16.0, 7.5, 7.5)
    dx = 0.25
    fl = geo.flow_from_object(depth, K, geo.RigidTransform(np.eye(3), [dx, 0, 0]), mask)
    np.testing.assert_allclose(fl.uv[mask][:, 0], K.fx * dx / 2.0, atol=1e-12)
    np.testing.assert_array_equal(fl.uv[~mask], 0.0)
    assert fl.valid[~mask].all()


def test_flow_from_object_empty_mask_fails():
    with pytest.raises(ValueError, match="empty"):
        geo.flow_from_object(np.ones((4, 4)), K32, geo.RigidTransform.identity(),
                             np.zeros((4, 4), dtype=bool))


def _microworld_case(idx):
    cfg = mw.WorldConfig(scenes=4, val_scenes=1, test_scenes=1, seed=21 + idx)
    spec = mw.sample_scene_spec(cfg, idx)
    return mw.generate_scene(spec)


def test_flow_from_camera_matches_microworld_oracle():
    rng = np.random.default_rng(3)
    for trial in range(30):
        scene = _microworld_case(trial % 6)
        K = scene.spec.intrinsics
        texel = mw.texel_spacing(scene.image_size)
        kx, ky = rng.integers(-2, 3, size=2)
        motion = geo.RigidTransform(np.eye(3), [kx * texel, ky * texel, 0.0])
        f0 = mw.render(scene, geo.RigidTransform.identity())
        fl_geo = geo.flow_from_camera(f0.depth, K, motion)
        fl_gt = mw.ground_truth_flow(scene, geo.RigidTransform.identity(), motion)
        both = fl_geo.valid & fl_gt.valid
        assert np.abs(fl_geo.uv[both] - fl_gt.uv[both]).max() < 1e-6


def test_flow_from_object_matches_microworld_oracle():
    rng = np.random.default_rng(4)
    checked = 0
    for trial in range(40):
        scene = _microworld_case(trial % 6)
        if not scene.spec.objects:
            continue
        obj = scene.spec.objects[0]
        K = scene.spec.intrinsics
        mx, my = rng.integers(-5, 6, size=2)
        delta = np.array([mx * obj.depth / K.fx, my * obj.depth / K.fy, 0.0])
        poses = scene.canonical_object_poses()
        moved = dict(poses)
        moved[obj.color_key] = geo.RigidTransform(np.eye(3), poses[obj.color_key].t + delta)
        f0 = mw.render(scene, geo.RigidTransform.identity(), poses)
        mask = f0.masks == obj.color_key
        if not mask.any():
            continue
        fl_geo = geo.flow_from_object(f0.depth, K, geo.RigidTransform(np.eye(3), delta), mask)
        fl_gt = mw.ground_truth_flow(scene, geo.RigidTransform.identity(),
                                     geo.RigidTransform.identity(), poses, moved)
        both = fl_geo.valid & fl_gt.valid & mask
        if both.any():
            assert np.abs(fl_geo.uv[both] - fl_gt.uv[both]).max() < 1e-6
            checked += 1
    assert checked >= 20


def test_fit_rigid_identity():
    a = np.random.default_rng(5).normal(size=(6, 3))
    T = geo.fit_rigid(a, a)
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.t, 0.0, atol=1e-12)


def test_fit_rigid_recovers_synthetic_transform():
    rng = np.random.default_rng(6)
    for _ in range(25):
        a = rng.normal(size=(4, 3))
        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(size=3)
        b = a @ R.T + t
        T = geo.fit_rigid(a, b)
        assert np.linalg.norm(T.R - R) < 1e-9
        assert np.linalg.norm(T.t - t) < 1e-9


def test_fit_rigid_noise_residual():
    rng = np.random.default_rng(7)
    sigma = 0.01
    residuals = []
    for _ in range(200):
        a = rng.normal(size=(4, 3))
        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(size=3)
        b = a @ R.T + t + rng.normal(scale=sigma, size=(4, 3))
        T = geo.fit_rigid(a, b)
        res = T.apply(a) - b
        residuals.append(np.sqrt((res ** 2).sum(axis=1).mean()))
    assert np.mean(residuals) <= 3 * sigma


def test_fit_rigid_degenerate_named():
    line = np.outer(np.arange(4), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="collinear"):
        geo.fit_rigid(line, line + 1.0)
    with pytest.raises(ValueError, match="at least 3"):
        geo.fit_rigid(line[:2], line[:2])


def test_fit_rigid_minimises_objective_2d_bruteforce():
    # brute-force over in-plane rotation angle on points embedded in z=0
    rng = np.random.default_rng(8)
    a2 = rng.normal(size=(5, 2))
    ang = 0.7
    R2 = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    b2 = a2 @ R2.T + [0.3, -0.2]
    a = np.concatenate([a2, np.zeros((5, 1))], axis=1)
    b = np.concatenate([b2, np.zeros((5, 1))], axis=1)
    T = geo.fit_rigid(a, b)
    fitted = ((T.apply(a) - b) ** 2).sum()
    best = np.inf
    for theta in np.linspace(-np.pi, np.pi, 20001):
        R = np.array([[np.cos(theta), -np.sin(theta), 0],
                      [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
        t = b.mean(axis=0) - R @ a.mean(axis=0)
        best = min(best, ((a @ R.T + t - b) ** 2).sum())
    assert fitted <= best + 1e-9


def test_depth_from_flow_uniform_inverse():
    K = geo.CameraIntrinsics(16.0, 16.0, 7.5, 7.5)
    z = 3.0
    ty = 0.75
    flow = geo.FlowField(np.stack([np.zeros((16, 16)), np.full((16, 16), K.fy * ty / z)], axis=-1),
                         np.ones((16, 16), dtype=bool))
    d = geo.depth_from_flow(flow, geo.CameraMotion(ty=ty, in_plane=True), K)
    np.testing.assert_allclose(d.values, z, atol=1e-12)
    assert not d.low_confidence.any()


def test_depth_from_flow_inverts_flow_from_camera():
    scene = _microworld_case(2)
    K = scene.spec.intrinsics
    f0 = mw.render(scene, geo.RigidTransform.identity())
    motion = geo.CameraMotion(ty=0.25, in_plane=True)
    fl = geo.flow_from_camera(f0.depth, K, motion.transform())
    d = geo.depth_from_flow(fl, motion, K)
    ok = ~d.low_confidence
    assert ok.mean() > 0.9
    np.testing.assert_allclose(d.values[ok], f0.depth[ok], atol=1e-6)


def test_depth_from_flow_eps_clamp():
    K = geo.CameraIntrinsics(16.0, 16.0, 7.5, 7.5)
    flow = geo.FlowField(np.full((4, 4, 2), 1e-5), np.ones((4, 4), dtype=bool))
    d = geo.depth_from_flow(flow, geo.CameraMotion(tx=0.5, in_plane=True), K,
                            eps=1e-3, max_depth=50.0)
    assert d.low_confidence.all()
    np.testing.assert_array_equal(d.values, 50.0)


def test_depth_from_flow_requires_translation():
    flow = geo.FlowField.zeros(4, 4)
    with pytest.raises(ValueError, match="non-zero"):
        geo.depth_from_flow(flow, geo.CameraMotion(in_plane=True), K32)
    with pytest.raises(ValueError, match="in-plane"):
        geo.depth_from_flow(flow, geo.CameraMotion(tx=0.1, rz=0.3), K32)


def test_camera_motion_inplane_invariant():
    with pytest.raises(ValueError, match="in-plane"):
        geo.CameraMotion(tx=0.1, tz=0.5, in_plane=True)


def test_aggregate_depth_single_and_median():
    d1 = geo.DepthMap(np.full((3, 3), 2.0))
    out = geo.aggregate_depth([d1])
    np.testing.assert_allclose(out.values, 2.0)
    z = np.full((3, 3), 4.0)
    maps = [geo.DepthMap(z), geo.DepthMap(z), geo.DepthMap(10 * z)]
    out = geo.aggregate_depth(maps)
    np.testing.assert_allclose(out.values, 4.0)
    with pytest.raises(ValueError, match="shape"):
        geo.aggregate_depth([d1, geo.DepthMap(np.ones((2, 2)))])


def test_sparse_seeds_selection():
    mask = np.zeros((32, 32), dtype=bool)
    mask[8:24, 8:24] = True
    uv = np.zeros((32, 32, 2))
    uv[..., 0] = 3.0
    flow = geo.FlowField(uv, np.ones((32, 32), dtype=bool))
    all_patches = geo.sparse_seeds(flow, mask, n_seeds=4, patch=8)
    assert len(all_patches.entries) == 4
    one = geo.sparse_seeds(flow, mask, n_seeds=1, patch=8)
    assert len(one.entries) == 1
    # centroid of the mask is at patch (1.5+, 1.5+): any of the 4 central patches
    r, c, patch_flow = one.entries[0]
    assert (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)]
    np.testing.assert_array_equal(patch_flow[..., 0], 3.0)
    with_stops = geo.sparse_seeds(flow, mask, n_seeds=2, with_stops=True, patch=8)
    assert len(with_stops.stops) == 4
    assert {(r, c) for r, c, _ in with_stops.stops} == {(0, 0), (0, 3), (3, 0), (3, 3)}
    for _, _, pf in with_stops.stops:
        np.testing.assert_array_equal(pf, 0.0)
    with pytest.raises(ValueError, match="patches"):
        geo.sparse_seeds(flow, mask, n_seeds=20, patch=8)


def test_sparse_prompt_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        geo.SparseFlowPrompt(patch=8, entries=[(0, 0, np.zeros((8, 8, 2))),
                                               (0, 0, np.zeros((8, 8, 2)))])


def test_transform_text_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    T = geo.RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3))
    path = tmp_path / "t.txt"
    geo.save_transform(str(path), T)
    back = geo.load_transform(str(path))
    np.testing.assert_array_equal(back.R, T.R)
    np.testing.assert_array_equal(back.t, T.t)


def test_rigid_transform_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        geo.RigidTransform(np.eye(3) * 1.001, np.zeros(3))
    flip = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError, match="determinant"):
        geo.RigidTransform(flip, np.zeros(3))
