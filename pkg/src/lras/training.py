"""Sequence-model training: batch assembly, curriculum, optimizer, resume.

All randomness derives from (seed, step), so an interrupted run resumed from
a checkpoint reproduces the uninterrupted loss stream exactly.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import hlq as hlq_mod
from . import numerics as nm
from .geometry import relative_motion, CameraMotion
from .model import ModelConfig, Transformer, save_model, load_model
from .serialize import Curriculum, EncodedExample, SequenceLayout, serialize


@dataclass
class TrainConfig:
    steps_phase1: int = 12000
    steps_phase2: int = 8000
    batch: int = 2
    lr: float = 3e-4
    warmup_steps: int = 200
    decay_frac: float = 0.15
    weight_decay: float = 0.01
    ordering: str = "random"
    include_pose_prob: float = 0.5
    seed: int = 0
    checkpoint_every: int = 2000

    @property
    def total_steps(self):
        return self.steps_phase1 + self.steps_phase2


def encode_dataset(dataset, hlq_rgb, hlq_flow, split="train"):
    """Quantize a dataset split once; returns scene_id -> EncodedExample."""
    out = {}
    flow_r = hlq_flow.config.flow_range
    for sid in dataset.scene_ids(split):
        rgb = [hlq_mod.encode(dataset.rgb(sid, t).astype(np.float64), hlq_rgb)
               for t in range(dataset.frames_per_scene)]
        flow = []
        poses = []
        for t in range(dataset.frames_per_scene - 1):
            fl = dataset.flow(sid, t)
            flow.append(hlq_mod.encode(np.clip(fl.uv, -flow_r, flow_r), hlq_flow))
            rel = relative_motion(dataset.pose(sid, t), dataset.pose(sid, t + 1))
            poses.append(CameraMotion.from_transform(rel).components())
        out[sid] = EncodedExample(rgb=rgb, flow=flow, poses=poses)
    return out


def layout_for(dataset, hlq_rgb, hlq_flow):
    grid = dataset.image_size // hlq_rgb.config.patch
    return SequenceLayout(grid=grid, frames=dataset.frames_per_scene,
                          levels=hlq_rgb.config.levels,
                          rgb_codebook=hlq_rgb.config.codebook_size,
                          flow_codebook=hlq_flow.config.codebook_size)


def lr_at(step, cfg):
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    decay_steps = int(cfg.total_steps * cfg.decay_frac)
    decay_start = cfg.total_steps - decay_steps
    if step >= decay_start and decay_steps > 0:
        return cfg.lr * max(0.0, (cfg.total_steps - step) / decay_steps)
    return cfg.lr


def assemble_batch(examples, scene_ids, curriculum, step, cfg, layout, context):
    """Serialize one batch; returns (tokens (B, S), supervised (B, S))."""
    seqs = []
    for k in range(cfg.batch):
        rng = np.random.default_rng([cfg.seed, step, k, 5])
        sid = scene_ids[int(rng.integers(0, len(scene_ids)))]
        schedule = curriculum.sample_schedule(step, rng)
        seqs.append(serialize(examples[sid], schedule, rng, layout=layout,
                              max_len=context))
    s = max(len(q) for q in seqs)
    tokens = np.full((cfg.batch, s), layout.bos, dtype=np.int64)
    sup = np.zeros((cfg.batch, s), dtype=bool)
    for i, q in enumerate(seqs):
        tokens[i, :len(q)] = q.tokens
        sup[i, :len(q)] = q.supervised
    return tokens, sup


def train_model(dataset, hlq_rgb, hlq_flow, model_cfg, cfg, out_path,
                log_path=None, resume=False, log=None):
    """Run (or resume) the two-phase curriculum; writes checkpoint + log."""
    layout = layout_for(dataset, hlq_rgb, hlq_flow)
    examples = encode_dataset(dataset, hlq_rgb, hlq_flow, split="train")
    scene_ids = sorted(examples)
    curriculum = Curriculum(total_steps=cfg.total_steps,
                            phase_boundary_frac=cfg.steps_phase1 / cfg.total_steps,
                            frames_available=dataset.frames_per_scene,
                            ordering=cfg.ordering,
                            include_pose_prob=cfg.include_pose_prob)

    if resume:
        model, opt_arrays = load_model(out_path, with_optimizer=True)
        if model.layout != layout:
            raise ValueError("checkpoint layout does not match the dataset")
        opt = nm.AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                       decay_filter=_decay_filter)
        if opt_arrays:
            opt.load_state_arrays(opt_arrays)
        start = model.step_counter
    else:
        model = Transformer(model_cfg, layout)
        opt = nm.AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                       decay_filter=_decay_filter)
        start = 0

    mode = "a" if resume else "w"
    log_f = open(log_path, mode) if log_path else None
    try:
        for step in range(start, cfg.total_steps):
            tokens, sup = assemble_batch(examples, scene_ids, curriculum, step,
                                         cfg, layout, model.config.context)
            opt.zero_grad()
            loss = model.supervised_loss(tokens, sup)
            val = float(loss.data)
            if not np.isfinite(val):
                raise RuntimeError(f"training diverged at step {step}: loss={val}")
            nm.backward(loss)
            lr = lr_at(step, cfg)
            opt.step(lr=lr)
            model.step_counter = step + 1
            if log_f:
                log_f.write(f"{step} {val:.6f} {lr:.6e}\n")
                if step % 50 == 0:
                    log_f.flush()
            if log and (step % 100 == 0 or step == cfg.total_steps - 1):
                log(step, val, lr)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_model(out_path, model, optimizer=opt)
        save_model(out_path, model, optimizer=opt)
    finally:
        if log_f:
            log_f.close()
    return model


def _decay_filter(name):
    return name.endswith((".wq", ".wk", ".wv", ".wo", ".w1", ".w2", "head.w"))
