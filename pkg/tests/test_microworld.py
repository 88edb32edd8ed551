import numpy as np
import pytest

from lras import arrayio
from lras import microworld as mw
from lras.geometry import CameraIntrinsics, RigidTransform


def small_cfg(**kw):
    base = dict(scenes=8, val_scenes=2, test_scenes=2, seed=5)
    base.update(kw)
    return mw.WorldConfig(**base)


def make_scene(seed=3, n_objects=1):
    cfg = small_cfg()
    spec = mw.sample_scene_spec(cfg, seed)
    if n_objects == 0:
        spec = mw.SceneSpec(spec.image_size, spec.layers, (), spec.intrinsics, spec.rng_seed)
    return mw.generate_scene(spec)


def test_generate_scene_deterministic():
    a = make_scene()
    b = make_scene()
    for ta, tb in zip(a.layer_textures, b.layer_textures):
        np.testing.assert_array_equal(ta.values, tb.values)
    fa = mw.render(a, RigidTransform.identity())
    fb = mw.render(b, RigidTransform.identity())
    np.testing.assert_array_equal(fa.rgb, fb.rgb)


def test_zero_object_scene_background_only():
    scene = make_scene(n_objects=0)
    frame = mw.render(scene, RigidTransform.identity(), {})
    assert (frame.masks == 0).all()


def test_zero_layers_rejected():
    scene = make_scene()
    bad = mw.SceneSpec(scene.spec.image_size, (), scene.spec.objects,
                       scene.spec.intrinsics, scene.spec.rng_seed)
    with pytest.raises(ValueError, match="layer"):
        mw.generate_scene(bad)


def test_depth_values_from_construction():
    scene = make_scene(n_objects=0)
    frame = mw.render(scene, RigidTransform.identity(), {})
    layer_depths = {l.depth for l in scene.spec.layers}
    assert set(np.unique(frame.depth)) <= layer_depths


def test_render_reference_frame_reproducible():
    scene = make_scene()
    f1 = mw.render(scene, RigidTransform.identity())
    f2 = mw.render(scene, RigidTransform.identity())
    np.testing.assert_array_equal(f1.rgb, f2.rgb)
    np.testing.assert_array_equal(f1.depth, f2.depth)


def test_camera_translation_shifts_layer_by_parallax():
    # world->camera translation t shifts a depth-Z plane by f*t/Z pixels
    scene = make_scene(n_objects=0)
    K = scene.spec.intrinsics
    z = max(l.depth for l in scene.spec.layers)
    t = np.array([z / K.fx * 3, 0.0, 0.0])  # exactly 3 px at the back layer
    f0 = mw.render(scene, RigidTransform.identity())
    f1 = mw.render(scene, RigidTransform(np.eye(3), t))
    back0 = f0.surface == -len(scene.spec.layers)
    shift = int(K.fx * t[0] / z)
    assert shift == 3
    sel = back0.copy()
    sel[:, -shift:] = False
    rows, cols = np.nonzero(sel)
    moved = f1.surface[rows, cols + shift] == -len(scene.spec.layers)
    np.testing.assert_array_equal(
        f1.rgb[rows[moved], cols[moved] + shift], f0.rgb[rows[moved], cols[moved]])


def test_moving_one_object_keeps_other_masks():
    cfg = small_cfg()
    spec = mw.sample_scene_spec(cfg, 11)
    if len(spec.objects) < 2:
        objs = list(spec.objects)
        extra = mw.ObjectSpec(texture_seed=777, footprint=objs[0].footprint,
                              center=(-objs[0].center[0], -objs[0].center[1]),
                              depth=objs[0].depth, color_key=max(o.color_key for o in objs) + 1)
        spec = mw.SceneSpec(spec.image_size, spec.layers, tuple(objs + [extra]),
                            spec.intrinsics, spec.rng_seed)
    scene = mw.generate_scene(spec)
    poses = scene.canonical_object_poses()
    mover = scene.spec.objects[0].color_key
    other = scene.spec.objects[1].color_key
    f0 = mw.render(scene, RigidTransform.identity(), poses)
    moved = dict(poses)
    d = scene.spec.objects[0].depth
    moved[mover] = RigidTransform(np.eye(3), poses[mover].t + np.array([5 * d / 64, 0, 0]))
    f1 = mw.render(scene, RigidTransform.identity(), moved)
    # where the mover is absent in both frames, the other object's mask is unchanged
    quiet = (f0.masks != mover) & (f1.masks != mover)
    np.testing.assert_array_equal((f0.masks == other)[quiet], (f1.masks == other)[quiet])


def test_camera_on_or_behind_surface_fails():
    scene = make_scene(n_objects=0)
    zmax = max(l.depth for l in scene.spec.layers)
    with pytest.raises(ValueError, match="backmost"):
        mw.render(scene, RigidTransform(np.eye(3), [0, 0, -zmax - 1.0]))
    z0 = scene.spec.layers[0].depth
    with pytest.raises(ValueError, match="layer plane"):
        mw.render(scene, RigidTransform(np.eye(3), [0, 0, -z0]))


def test_flow_zero_for_identity_motion():
    scene = make_scene()
    fl = mw.ground_truth_flow(scene, RigidTransform.identity(), RigidTransform.identity())
    assert fl.valid.all()
    np.testing.assert_array_equal(fl.uv, 0.0)


def test_flow_pure_translation_parallax():
    scene = make_scene(n_objects=0)
    K = scene.spec.intrinsics
    ty = 0.125
    p1 = RigidTransform(np.eye(3), [0.0, ty, 0.0])
    fl = mw.ground_truth_flow(scene, RigidTransform.identity(), p1)
    f0 = mw.render(scene, RigidTransform.identity())
    expected_v = K.fy * ty / f0.depth
    np.testing.assert_allclose(fl.uv[fl.valid][:, 1], expected_v[fl.valid], atol=1e-9)
    np.testing.assert_allclose(fl.uv[fl.valid][:, 0], 0.0, atol=1e-9)


def test_flow_object_translation():
    scene = make_scene(seed=12)
    obj = scene.spec.objects[0]
    poses = scene.canonical_object_poses()
    K = scene.spec.intrinsics
    dx_px = 4
    moved = dict(poses)
    moved[obj.color_key] = RigidTransform(
        np.eye(3), poses[obj.color_key].t + np.array([dx_px * obj.depth / K.fx, 0, 0]))
    fl = mw.ground_truth_flow(scene, RigidTransform.identity(), RigidTransform.identity(),
                              poses, moved)
    f0 = mw.render(scene, RigidTransform.identity(), poses)
    on = f0.masks == obj.color_key
    np.testing.assert_allclose(fl.uv[on][:, 0], dx_px, atol=1e-9)
    off_valid = (~on) & fl.valid
    np.testing.assert_array_equal(fl.uv[off_valid], 0.0)


def test_warp_consistency_exact():
    cfg = small_cfg()
    worst = 0.0
    for i in range(cfg.scenes):
        scene, _, cams, objs = mw.scene_from_index(cfg, i)
        for t in range(cfg.frames - 1):
            f0 = mw.render(scene, cams[t], objs[t])
            f1 = mw.render(scene, cams[t + 1], objs[t + 1])
            fl = mw.ground_truth_flow(scene, cams[t], cams[t + 1], objs[t], objs[t + 1])
            n = scene.image_size
            v, u = np.mgrid[0:n, 0:n]
            iu = np.floor(u + fl.uv[..., 0] + 0.5).astype(int)
            iv = np.floor(v + fl.uv[..., 1] + 0.5).astype(int)
            ok = fl.valid
            worst = max(worst, float(np.abs(f1.rgb[iv[ok], iu[ok]] - f0.rgb[ok]).max()))
    assert worst <= 1.0 / 255.0


def test_depth_flow_consistency():
    scene = make_scene(seed=9)
    K = scene.spec.intrinsics
    ty = 0.25
    fl = mw.ground_truth_flow(scene, RigidTransform.identity(),
                              RigidTransform(np.eye(3), [0, ty, 0]))
    f0 = mw.render(scene, RigidTransform.identity())
    mag = np.hypot(fl.uv[..., 0], fl.uv[..., 1])
    sel = fl.valid & (mag > 0)
    np.testing.assert_allclose((K.fy * ty / mag)[sel], f0.depth[sel], atol=1e-6)


def test_build_dataset_roundtrip(tmp_path):
    cfg = small_cfg(frames=2)
    out = tmp_path / "data"
    mw.build_dataset(cfg, str(out))
    ds = mw.Dataset(str(out))
    assert ds.frames_per_scene == 2
    assert len(ds.scene_ids("train")) + len(ds.scene_ids("val")) + len(ds.scene_ids("test")) == cfg.scenes
    assert not (set(ds.scene_ids("train")) & set(ds.scene_ids("val")))
    rgb = ds.rgb(0, 0)
    assert rgb.shape == (cfg.image_size, cfg.image_size, 3)
    fl = ds.flow(0, 0)
    assert fl.uv.shape == (cfg.image_size, cfg.image_size, 2)
    # files round-trip the in-memory render exactly
    scene, _, cams, objs = ds.regenerate(0)
    fr = mw.render(scene, cams[0], objs[0])
    np.testing.assert_array_equal(rgb, fr.rgb)
    np.testing.assert_array_equal(ds.mask(0, 0), fr.masks)
    p = ds.pose(0, 1)
    np.testing.assert_array_equal(p.t, cams[1].t)


def test_build_dataset_existing_dir_fails(tmp_path):
    cfg = small_cfg(frames=2)
    out = tmp_path / "data"
    mw.build_dataset(cfg, str(out))
    with pytest.raises(FileExistsError, match="exists"):
        mw.build_dataset(cfg, str(out))
    mw.build_dataset(cfg, str(out), force=True)


def test_manifest_identical_across_runs(tmp_path):
    cfg = small_cfg(frames=2)
    mw.build_dataset(cfg, str(tmp_path / "a"))
    mw.build_dataset(cfg, str(tmp_path / "b"))
    assert (tmp_path / "a" / "manifest").read_bytes() == (tmp_path / "b" / "manifest").read_bytes()


def test_zero_motion_dataset_flow_zero(tmp_path):
    cfg = small_cfg(scenes=4, val_scenes=1, test_scenes=1, frames=2,
                    category_probs=(0.0, 0.0, 0.0, 1.0))
    mw.build_dataset(cfg, str(tmp_path / "d"))
    ds = mw.Dataset(str(tmp_path / "d"))
    for sid in range(4):
        np.testing.assert_array_equal(ds.flow(sid, 0).uv, 0.0)


def test_default_config_flow_validity():
    # measured on a 60-scene slice of the default distribution
    cfg = mw.WorldConfig(scenes=60, val_scenes=2, test_scenes=2)
    fracs = []
    for i in range(cfg.scenes):
        scene, _, cams, objs = mw.scene_from_index(cfg, i)
        for t in range(cfg.frames - 1):
            fracs.append(mw.ground_truth_flow(scene, cams[t], cams[t + 1],
                                              objs[t], objs[t + 1]).valid.mean())
    assert np.mean(fracs) >= 0.95


def test_array_io_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(4,), (3, 5), (2, 3, 4), (64, 64, 3)]:
        arr = rng.normal(size=shape).astype(np.float32)
        path = tmp_path / "x.bin"
        arrayio.write_array(str(path), arr)
        back = arrayio.read_array(str(path))
        np.testing.assert_array_equal(arr, back)
        assert back.dtype == np.float32
    with open(tmp_path / "x.bin", "rb") as f:
        assert f.read(4) == b"MW01"
