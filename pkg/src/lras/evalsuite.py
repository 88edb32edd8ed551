"""Evaluation suites over the held-out split, with text + CSV reports.

Each suite regenerates the held-out scenes and draws fresh motions from the
training distribution with a suite-local seed, so all held-out scenes are
usable for every task. Reports are deterministic functions of (dataset,
checkpoints, seed, config).
"""

import os

import numpy as np

from . import metrics as mx
from . import microworld as mw
from . import pathways as pw
from .geometry import CameraMotion, RigidTransform, relative_motion, sparse_seeds
from .model import Sampler


def _eval_scenes(dataset, max_scenes):
    ids = dataset.scene_ids("val")
    return ids[:max_scenes] if max_scenes else ids


def _camera_pair(scene, rng, cfg):
    """Frame pair under a fresh camera-only move from the data distribution."""
    _, cams, objs = mw.sample_motion(scene, rng, cfg, category="camera")
    f0 = mw.render(scene, cams[0], objs[0])
    f1 = mw.render(scene, cams[1], objs[1])
    rel = relative_motion(cams[0], cams[1])
    return f0, f1, rel


def _object_move(scene, rng, move_px_min, move_px_max):
    """A fresh in-plane object move; returns (object, delta_world)."""
    f0 = mw.render(scene, RigidTransform.identity())
    candidates = [o for o in scene.spec.objects if (f0.masks == o.color_key).sum() >= 32]
    if not candidates:
        return None, None, f0
    obj = candidates[int(rng.integers(0, len(candidates)))]
    mag = int(rng.integers(move_px_min, move_px_max + 1))
    ang = rng.uniform(0, 2 * np.pi)
    mx_, my_ = int(np.round(mag * np.cos(ang))), int(np.round(mag * np.sin(ang)))
    if mx_ == 0 and my_ == 0:
        mx_ = mag
    f = scene.spec.intrinsics.fx
    delta = np.array([mx_ * obj.depth / f, my_ * obj.depth / f, 0.0])
    return obj, delta, f0


def _write_report(out_dir, name, summary, rows, header, config_echo):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}_report.txt"), "w") as f:
        for k, v in summary:
            f.write(f"{k} = {v}\n")
        f.write("\n# configuration\n")
        for line in config_echo.splitlines():
            f.write(f"# {line}\n")
    with open(os.path.join(out_dir, f"{name}_table.csv"), "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(x) for x in row) + "\n")
    return dict(summary)


def suite_nvs(dataset, ckpts, out_dir, seed=900, max_scenes=50, config_echo=""):
    rows = []
    for sid in _eval_scenes(dataset, max_scenes):
        scene, _, _, _ = dataset.regenerate(sid)
        rng = np.random.default_rng([seed, sid, 1])
        f0, f1, rel = _camera_pair(scene, rng, dataset.config)
        res = pw.run_nvs(f0.rgb, f0.depth, scene.spec.intrinsics, rel, ckpts,
                         Sampler(temperature=0.0), rng)
        rows.append((sid, f"{mx.psnr(res.image, f1.rgb):.6f}",
                     f"{mx.ssim(res.image, f1.rgb):.6f}"))
    psnrs = [float(r[1]) for r in rows]
    ssims = [float(r[2]) for r in rows]
    summary = [("suite", "nvs"), ("scenes", len(rows)),
               ("median_psnr", f"{np.median(psnrs):.6f}"),
               ("median_ssim", f"{np.median(ssims):.6f}")]
    return _write_report(out_dir, "nvs", summary, rows,
                         ["scene_id", "psnr", "ssim"], config_echo)


def suite_edit(dataset, ckpts, out_dir, seed=900, max_scenes=50,
               move_px_min=3, move_px_max=5, config_echo=""):
    rows = []
    for sid in _eval_scenes(dataset, max_scenes):
        scene, _, _, _ = dataset.regenerate(sid)
        rng = np.random.default_rng([seed, sid, 2])
        obj, delta, f0 = _object_move(scene, rng, move_px_min, move_px_max)
        if obj is None:
            continue
        transform = RigidTransform(np.eye(3), delta)
        poses = scene.canonical_object_poses()
        moved = dict(poses)
        moved[obj.color_key] = RigidTransform(np.eye(3), poses[obj.color_key].t + delta)
        target = mw.render(scene, RigidTransform.identity(), moved)
        background = mw.render(scene, RigidTransform.identity(), moved,
                               exclude={obj.color_key})
        mask = f0.masks == obj.color_key
        res = pw.run_object_edit(f0.rgb, f0.depth, scene.spec.intrinsics, mask,
                                 transform, ckpts, Sampler(temperature=0.0), rng)
        ea = mx.edit_adherence(res.image, target, background.rgb, obj.color_key)
        # zero-flow conditioning patches that reproduce the source codes
        g = ckpts.layout.grid
        p = dataset.image_size // g
        zero_patch = ~np.any(res.flow.uv.reshape(g, p, g, p, 2), axis=(1, 3, 4))
        same = np.all(res.codes.codes == res.source_codes.codes, axis=-1)
        keep = float(same[zero_patch].mean()) if zero_patch.any() else 1.0
        rows.append((sid, f"{ea:.6f}", f"{mx.psnr(res.image, target.rgb):.6f}",
                     f"{keep:.6f}"))
    eas = [float(r[1]) for r in rows]
    keeps = [float(r[3]) for r in rows]
    summary = [("suite", "edit"), ("scenes", len(rows)),
               ("median_edit_adherence", f"{np.median(eas):.6f}"),
               ("median_psnr", f"{np.median([float(r[2]) for r in rows]):.6f}"),
               ("mean_background_code_keep", f"{np.mean(keeps):.6f}")]
    return _write_report(out_dir, "edit", summary, rows,
                         ["scene_id", "edit_adherence", "psnr", "background_keep"],
                         config_echo)


def suite_depth(dataset, ckpts, out_dir, seed=900, max_scenes=50,
                probe_ty=0.25, n_seeds=5, oracle=False, config_echo=""):
    probe = CameraMotion(ty=probe_ty, in_plane=True)
    rows = []
    for sid in _eval_scenes(dataset, max_scenes):
        scene, _, _, _ = dataset.regenerate(sid)
        f0 = mw.render(scene, RigidTransform.identity())
        K = scene.spec.intrinsics
        if oracle:
            gt_flow = mw.ground_truth_flow(scene, RigidTransform.identity(),
                                           RigidTransform(np.eye(3), [0, probe_ty, 0]))
            est = pw.run_depth_estimation(f0.rgb, probe, K, 1, ckpts,
                                          oracle_flow=gt_flow)
            est_single = est
        else:
            est = pw.run_depth_estimation(f0.rgb, probe, K, n_seeds, ckpts,
                                          base_seed=seed * 1000 + sid)
            est_single = pw.run_depth_estimation(f0.rgb, probe, K, 1, ckpts,
                                                 base_seed=seed * 1000 + sid)
        valid = ~est.low_confidence
        m = mx.depth_metrics(est, f0.depth, valid)
        m1 = mx.depth_metrics(est_single, f0.depth, ~est_single.low_confidence)
        rows.append((sid, f"{m.absrel:.6f}", f"{m.log10:.6f}", f"{m.delta1:.6f}",
                     f"{m1.absrel:.6f}"))
    summary = [("suite", "depth"), ("scenes", len(rows)),
               ("median_absrel", f"{np.median([float(r[1]) for r in rows]):.6f}"),
               ("median_log10", f"{np.median([float(r[2]) for r in rows]):.6f}"),
               ("median_delta1", f"{np.median([float(r[3]) for r in rows]):.6f}"),
               ("median_absrel_single_seed", f"{np.median([float(r[4]) for r in rows]):.6f}")]
    return _write_report(out_dir, "depth", summary, rows,
                         ["scene_id", "absrel", "log10", "delta1", "absrel_1seed"],
                         config_echo)


def suite_composite(dataset, ckpts, out_dir, seed=900, max_scenes=50,
                    move_px_min=3, move_px_max=5, n_seeds=3, config_echo=""):
    """Edit-then-NVS chains scored against the analytically rendered target."""
    rows = []
    for sid in _eval_scenes(dataset, max_scenes):
        scene, _, _, _ = dataset.regenerate(sid)
        rng = np.random.default_rng([seed, sid, 4])
        obj, delta, f0 = _object_move(scene, rng, move_px_min, move_px_max)
        if obj is None:
            continue
        mask = f0.masks == obj.color_key
        texel = mw.texel_spacing(scene.image_size)
        cam_t = np.array([texel, 0.0, 0.0]) * int(rng.choice([-1, 1]))
        steps = [pw.PathwaySpec(kind="object_edit", mask=mask,
                                transform=RigidTransform(np.eye(3), delta),
                                n_seeds=n_seeds),
                 pw.PathwaySpec(kind="nvs",
                                transform=RigidTransform(np.eye(3), cam_t),
                                n_seeds=n_seeds)]
        images = pw.run_composite(f0.rgb, f0.depth, scene.spec.intrinsics, steps,
                                  ckpts, Sampler(temperature=0.0),
                                  base_seed=seed * 100 + sid)
        poses = scene.canonical_object_poses()
        moved = dict(poses)
        moved[obj.color_key] = RigidTransform(np.eye(3), poses[obj.color_key].t + delta)
        target = mw.render(scene, RigidTransform(np.eye(3), cam_t), moved)
        rows.append((sid, f"{mx.psnr(images[-1], target.rgb):.6f}"))
    summary = [("suite", "composite"), ("scenes", len(rows)),
               ("median_psnr", f"{np.median([float(r[1]) for r in rows]):.6f}")]
    return _write_report(out_dir, "composite", summary, rows,
                         ["scene_id", "psnr"], config_echo)


SUITES = {"nvs": suite_nvs, "edit": suite_edit, "depth": suite_depth,
          "composite": suite_composite}
