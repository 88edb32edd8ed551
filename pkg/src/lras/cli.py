"""Operator surface: data generation, training stages, inference, evaluation.

One process per command; all randomness hangs off ``--seed``; every artifact
carries the resolved configuration. ``LRAS_THREADS`` sets the dataset-builder
worker count.
"""

import argparse
import os
import sys

import numpy as np

from . import hlq as hlq_mod
from . import arrayio
from . import evalsuite
from . import microworld as mw
from . import pathways as pw
from . import training
from .config import RunConfig
from .geometry import (CameraMotion, load_transform, save_transform, fit_rigid,
                       sparse_seeds, FlowField)
from .model import Sampler, load_model


def _load_config(args):
    cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "override", []) or [])
    if getattr(args, "seed", None) is not None:
        cfg.derive_seeds(args.seed)
    return cfg


def _workers():
    return max(int(os.environ.get("LRAS_THREADS", "1")), 1)


def cmd_generate_data(args):
    cfg = _load_config(args)
    world = cfg.world_config()
    try:
        mw.build_dataset(world, args.out, force=args.force, workers=_workers())
    except FileExistsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    cfg.save(os.path.join(args.out, "run_config"))
    print(f"dataset with {world.scenes} scenes written to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    ds = mw.Dataset(args.data)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    log_path = args.log or (args.out + ".log")

    if args.stage in ("hlq-rgb", "hlq-flow"):
        modality = "rgb" if args.stage == "hlq-rgb" else "flow"
        hcfg = cfg.hlq_config(modality)
        log_f = open(log_path, "w")
        try:
            model, _ = hlq_mod.train_hlq(
                ds, hcfg, log=lambda s, l, r: log_f.write(f"{s} {l:.6f} {r:.6e}\n"))
        finally:
            log_f.close()
        hlq_mod.save_hlq(args.out, model)
        print(f"{args.stage} checkpoint written to {args.out}")
        return 0

    # stage: model
    missing = [name for name, path in [("--hlq-rgb", args.hlq_rgb),
                                       ("--hlq-flow", args.hlq_flow)]
               if not (path and os.path.exists(path))]
    if missing:
        print("error: stage model needs trained quantizer checkpoints; missing "
              + " and ".join(missing), file=sys.stderr)
        return 1
    hr = hlq_mod.load_hlq(args.hlq_rgb)
    hf = hlq_mod.load_hlq(args.hlq_flow)
    training.train_model(ds, hr, hf, cfg.model_config(), cfg.train_config(),
                         args.out, log_path=log_path, resume=args.resume)
    print(f"model checkpoint written to {args.out}")
    return 0


def _load_ckpts(args):
    return pw.PathwayCheckpoints(hlq_rgb=hlq_mod.load_hlq(args.hlq_rgb),
                                 hlq_flow=hlq_mod.load_hlq(args.hlq_flow),
                                 model=load_model(args.model))


def _save_image(path, rgb):
    from PIL import Image
    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_infer(args):
    valid = ("nvs", "object_edit", "flow_completion", "depth_estimation", "composite")
    if args.pathway not in valid:
        print(f"error: unknown pathway {args.pathway!r}; valid: {', '.join(valid)}",
              file=sys.stderr)
        return 1
    cfg = _load_config(args)
    ckpts = _load_ckpts(args)
    seed = args.seed if args.seed is not None else 0
    temperature = args.temperature if args.temperature is not None \
        else cfg.sections["sampler"]["temperature"]
    sampler = Sampler(temperature=temperature, top_k=cfg.sections["sampler"]["top_k"],
                      rng=np.random.default_rng([seed, 13]))
    rng = np.random.default_rng([seed, 17])
    os.makedirs(args.out, exist_ok=True)

    rgb0 = arrayio.read_array(args.rgb).astype(np.float64)
    K = mw.default_intrinsics(rgb0.shape[0])
    depth = arrayio.read_array(args.depth).astype(np.float64) if args.depth else None

    if args.pathway == "nvs":
        res = pw.run_nvs(rgb0, depth, K, load_transform(args.transform), ckpts,
                         sampler, rng)
        arrayio.write_array(os.path.join(args.out, "rgb1.bin"), res.image)
        _save_image(os.path.join(args.out, "rgb1.png"), res.image)
    elif args.pathway == "object_edit":
        mask = arrayio.read_array(args.mask) > 0.5
        res = pw.run_object_edit(rgb0, depth, K, mask, load_transform(args.transform),
                                 ckpts, sampler, rng)
        arrayio.write_array(os.path.join(args.out, "rgb1.bin"), res.image)
        _save_image(os.path.join(args.out, "rgb1.png"), res.image)
    elif args.pathway == "flow_completion":
        mask = arrayio.read_array(args.mask) > 0.5
        dense = arrayio.read_array(args.flow)
        prompt = sparse_seeds(FlowField(dense[..., :2].astype(np.float64),
                                        dense[..., 2] > 0.5),
                              mask, n_seeds=args.n_seeds,
                              with_stops=args.with_stops,
                              patch=ckpts.hlq_flow.config.patch)
        flow = pw.run_flow_completion(rgb0, prompt, ckpts, sampler, rng)
        packed = np.concatenate([flow.uv, flow.valid[..., None].astype(np.float64)], axis=-1)
        arrayio.write_array(os.path.join(args.out, "flow.bin"), packed)
    elif args.pathway == "depth_estimation":
        probe = CameraMotion(ty=args.probe_ty, in_plane=True)
        est = pw.run_depth_estimation(rgb0, probe, K, args.n_seeds, ckpts,
                                      base_seed=seed, temperature=temperature,
                                      top_k=cfg.sections["sampler"]["top_k"])
        arrayio.write_array(os.path.join(args.out, "depth.bin"), est.values)
        _save_image(os.path.join(args.out, "depth.png"),
                    np.repeat((1.0 / est.values / (1.0 / est.values).max())[..., None], 3, -1))
    else:  # composite: edit an object away, then move the camera
        mask = arrayio.read_array(args.mask) > 0.5
        steps = [pw.PathwaySpec(kind="object_edit", mask=mask,
                                transform=load_transform(args.transform)),
                 pw.PathwaySpec(kind="nvs",
                                transform=load_transform(args.transform2))]
        images = pw.run_composite(rgb0, depth, K, steps, ckpts, sampler, base_seed=seed)
        for i, img in enumerate(images):
            arrayio.write_array(os.path.join(args.out, f"step_{i}.bin"), img)
            _save_image(os.path.join(args.out, f"step_{i}.png"), img)
    cfg.save(os.path.join(args.out, "run_config"))
    print(f"{args.pathway} outputs written to {args.out}")
    return 0


def cmd_eval(args):
    if args.suite not in evalsuite.SUITES:
        print(f"error: unknown suite {args.suite!r}; valid: "
              f"{', '.join(sorted(evalsuite.SUITES))}", file=sys.stderr)
        return 1
    cfg = _load_config(args)
    ev = cfg.sections["eval"]
    ds = mw.Dataset(args.data)
    ckpts = _load_ckpts(args)
    echo = cfg.echo_text()
    kw = dict(seed=ev["seed"], max_scenes=ev["max_scenes"], config_echo=echo)
    if args.suite == "depth":
        kw.update(probe_ty=ev["depth_probe_ty"], n_seeds=ev["n_seeds"],
                  oracle=args.oracle)
    if args.suite in ("edit", "composite"):
        kw.update(move_px_min=ev["edit_move_px_min"], move_px_max=ev["edit_move_px_max"])
    if args.suite == "composite":
        kw.update(n_seeds=ev["composite_n_seeds"])
    summary = evalsuite.SUITES[args.suite](ds, ckpts, args.out, **kw)
    for k, v in summary.items():
        print(f"{k} = {v}")
    return 0


def cmd_fit_rigid(args):
    a = np.loadtxt(args.points_a, ndmin=2)
    b = np.loadtxt(args.points_b, ndmin=2)
    try:
        transform = fit_rigid(a, b)
    except ValueError as e:
        print(f"error: degenerate input: {e}", file=sys.stderr)
        return 1
    save_transform(args.out, transform)
    print(f"transform written to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lras", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run-config text file")
        sp.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                        help="config override by dotted path (repeatable)")
        sp.add_argument("--seed", type=int, help="master seed for all randomness")

    g = sub.add_parser("generate-data", help="render the synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate_data)

    t = sub.add_parser("train", help="train a pipeline stage")
    common(t)
    t.add_argument("--stage", required=True, choices=["hlq-rgb", "hlq-flow", "model"])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--hlq-rgb")
    t.add_argument("--hlq-flow")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--log")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="run an inference pathway")
    common(i)
    i.add_argument("--pathway", required=True)
    i.add_argument("--rgb", required=True)
    i.add_argument("--depth")
    i.add_argument("--mask")
    i.add_argument("--flow")
    i.add_argument("--transform")
    i.add_argument("--transform2")
    i.add_argument("--probe-ty", type=float, default=0.25)
    i.add_argument("--n-seeds", type=int, default=5)
    i.add_argument("--with-stops", action="store_true")
    i.add_argument("--temperature", type=float)
    i.add_argument("--hlq-rgb", required=True)
    i.add_argument("--hlq-flow", required=True)
    i.add_argument("--model", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="run an evaluation suite on the val split")
    common(e)
    e.add_argument("--suite", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--hlq-rgb", required=True)
    e.add_argument("--hlq-flow", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--oracle", action="store_true",
                   help="depth suite: bypass the model with ground-truth flow")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("fit-rigid", help="least-squares rigid transform between point files")
    f.add_argument("--points-a", required=True)
    f.add_argument("--points-b", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_fit_rigid)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
