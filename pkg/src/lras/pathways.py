"""Zero-shot inference pathways: different conditional queries over one model.

Each pathway builds a conditioning prefix (quantized patches and/or pose
tokens), decodes the queried pointers autoregressively, and maps codes back
to pixels. Conditioning tokens are part of the sequence verbatim, so prompted
patches always survive into the output unchanged.
"""

from dataclasses import dataclass, field

import numpy as np

from . import hlq as hlq_mod
from . import geometry as geo
from .model import Sampler
from .serialize import PointerAddress, pose_bins_from_components

DEPTH_PROBE = geo.CameraMotion(ty=0.25, in_plane=True)


@dataclass
class PathwayCheckpoints:
    hlq_rgb: object
    hlq_flow: object
    model: object

    def __post_init__(self):
        if self.hlq_rgb is None or self.hlq_flow is None or self.model is None:
            raise ValueError("nvs/editing pathways need hlq_rgb, hlq_flow, and model checkpoints")

    @property
    def layout(self):
        return self.model.layout


@dataclass
class PathwaySpec:
    """One step of a composite plan."""

    kind: str
    transform: geo.RigidTransform = None     # nvs / object_edit
    motion: geo.CameraMotion = None          # depth_estimation
    mask: np.ndarray = None                  # object_edit
    prompt: geo.SparseFlowPrompt = None      # flow_completion
    n_seeds: int = 5

    def validate(self):
        if self.kind == "nvs" and self.transform is None:
            raise ValueError("nvs step needs a camera transform")
        if self.kind == "object_edit" and (self.transform is None or self.mask is None):
            raise ValueError("object_edit step needs a transform and an object mask")
        if self.kind == "flow_completion" and self.prompt is None:
            raise ValueError("flow_completion step needs a sparse prompt")
        if self.kind == "depth_estimation":
            if self.motion is None or not self.motion.in_plane:
                raise ValueError("depth_estimation step needs an in-plane camera motion")
        if self.kind not in ("nvs", "object_edit", "flow_completion",
                             "depth_estimation", "composite"):
            raise ValueError(f"unknown pathway kind {self.kind!r}")


def _patch_token_block(layout, codes, t, modality, order):
    """Pointer + content tokens for the given patches in the given order."""
    token_of = layout.rgb_code_token if modality == "rgb" else layout.flow_code_token
    toks = []
    for r, c in order:
        toks.append(layout.pointer_token(PointerAddress(t, modality, r, c)))
        for level in range(layout.levels):
            toks.append(token_of(level, codes.codes[r, c, level]))
    return toks


def _all_patches(layout, rng):
    g = layout.grid
    order = [(i // g, i % g) for i in range(g * g)]
    if rng is not None:
        perm = rng.permutation(len(order))
        order = [order[i] for i in perm]
    return order


def _pose_tokens(layout, t, motion):
    toks = [layout.pointer_token(PointerAddress(t, "camera"))]
    toks += [layout.pose_token(b)
             for b in pose_bins_from_components(motion.components(), layout)]
    return toks


def _check_flow_range(flow_uv, hlq_flow):
    r = hlq_flow.config.flow_range
    worst = float(np.max(np.abs(flow_uv))) if flow_uv.size else 0.0
    if worst > r:
        raise ValueError(f"conditioning flow magnitude {worst:.2f} px exceeds "
                         f"quantizer range [-{r}, {r}]")


def _decode_rgb_frame(ckpts, prefix_tokens, t, sampler, rng):
    layout = ckpts.layout
    queries = [PointerAddress(t, "rgb", r, c) for r, c in _all_patches(layout, rng)]
    out = ckpts.model.decode(np.asarray(prefix_tokens), queries, sampler)
    grid = layout.grid
    codes = np.zeros((grid, grid, layout.levels), dtype=np.int32)
    for addr, row in zip(queries, out):
        codes[addr.row, addr.col] = row
    patch_codes = hlq_mod.PatchCodes((grid, grid), codes, "rgb")
    return hlq_mod.decode(patch_codes, ckpts.hlq_rgb), patch_codes


def _flow_conditioned_rgb(rgb0, flow, ckpts, sampler, rng):
    _check_flow_range(flow.uv, ckpts.hlq_flow)
    layout = ckpts.layout
    rgb_codes = hlq_mod.encode(np.asarray(rgb0, dtype=np.float64), ckpts.hlq_rgb)
    flow_codes = hlq_mod.encode(flow.uv, ckpts.hlq_flow)
    tokens = [layout.bos]
    tokens += _patch_token_block(layout, rgb_codes, 0, "rgb", _all_patches(layout, rng))
    tokens += _patch_token_block(layout, flow_codes, 0, "flow", _all_patches(layout, rng))
    image, codes = _decode_rgb_frame(ckpts, tokens, 1, sampler, rng)
    return image, codes, rgb_codes


def run_nvs(rgb0, depth, K, rel_pose, ckpts, sampler=None, rng=None):
    """Flow-conditioned next-frame synthesis for a camera move.

    Builds the dense flow a camera motion induces over the given depth,
    conditions on [RGB0 tokens, flow tokens], and decodes every frame-1 patch.
    """
    sampler = sampler or Sampler(temperature=0.0)
    rng = rng or np.random.default_rng(0)
    flow = geo.flow_from_camera(np.asarray(depth, dtype=np.float64), K, rel_pose)
    image, codes, rgb0_codes = _flow_conditioned_rgb(rgb0, flow, ckpts, sampler, rng)
    return NvsResult(image=image, flow=flow, codes=codes, source_codes=rgb0_codes)


def run_object_edit(rgb0, depth, K, mask, transform, ckpts, sampler=None, rng=None):
    """Move one object via its rigid-motion flow; background pinned to zero."""
    sampler = sampler or Sampler(temperature=0.0)
    rng = rng or np.random.default_rng(0)
    flow = geo.flow_from_object(np.asarray(depth, dtype=np.float64), K, transform, mask)
    image, codes, rgb0_codes = _flow_conditioned_rgb(rgb0, flow, ckpts, sampler, rng)
    return NvsResult(image=image, flow=flow, codes=codes, source_codes=rgb0_codes)


@dataclass
class NvsResult:
    image: np.ndarray
    flow: geo.FlowField
    codes: object             # decoded frame-1 PatchCodes
    source_codes: object      # frame-0 PatchCodes


def encode_prompt(prompt, hlq_flow):
    """Fill a sparse prompt's codes by locally quantizing its patches."""
    p = prompt.patch
    entries = list(prompt.entries) + list(prompt.stops)
    gmax = max(max(r, c) for r, c, _ in entries) + 1
    size = max(gmax * p, p)
    canvas = np.zeros((size, size, 2))
    for r, c, pf in entries:
        canvas[r * p:(r + 1) * p, c * p:(c + 1) * p, :] = pf
    codes = hlq_mod.encode(canvas, hlq_flow)
    prompt.codes = {(r, c): codes.codes[r, c].copy() for r, c, _ in entries}
    return prompt


def run_flow_completion(rgb0, prompt, ckpts, sampler=None, rng=None):
    """Densify a sparse flow prompt by decoding all unprompted flow patches."""
    sampler = sampler or Sampler(temperature=0.0)
    rng = rng or np.random.default_rng(0)
    layout = ckpts.layout
    if prompt.codes is None:
        encode_prompt(prompt, ckpts.hlq_flow)
    rgb_codes = hlq_mod.encode(np.asarray(rgb0, dtype=np.float64), ckpts.hlq_rgb)
    tokens = [layout.bos]
    tokens += _patch_token_block(layout, rgb_codes, 0, "rgb", _all_patches(layout, rng))
    grid = layout.grid
    full = np.zeros((grid, grid, layout.levels), dtype=np.int32)
    prompted = sorted(prompt.codes)
    for r, c in prompted:
        tokens.append(layout.pointer_token(PointerAddress(0, "flow", r, c)))
        full[r, c] = prompt.codes[(r, c)]
        for level in range(layout.levels):
            tokens.append(layout.flow_code_token(level, full[r, c, level]))
    rest = [(r, c) for r, c in _all_patches(layout, rng) if (r, c) not in prompt.codes]
    queries = [PointerAddress(0, "flow", r, c) for r, c in rest]
    out = ckpts.model.decode(np.asarray(tokens), queries, sampler)
    for addr, row in zip(queries, out):
        full[addr.row, addr.col] = row
    patch_codes = hlq_mod.PatchCodes((grid, grid), full, "flow")
    uv = hlq_mod.decode(patch_codes, ckpts.hlq_flow)
    return geo.FlowField(uv, np.ones(uv.shape[:2], dtype=bool))


def predict_flow_from_pose(rgb0, motion, ckpts, sampler, rng):
    """Camera-conditioned flow prediction: [RGB0, pose] -> dense flow."""
    layout = ckpts.layout
    rgb_codes = hlq_mod.encode(np.asarray(rgb0, dtype=np.float64), ckpts.hlq_rgb)
    tokens = [layout.bos]
    tokens += _patch_token_block(layout, rgb_codes, 0, "rgb", _all_patches(layout, rng))
    tokens += _pose_tokens(layout, 0, motion)
    grid = layout.grid
    queries = [PointerAddress(0, "flow", r, c) for r, c in _all_patches(layout, rng)]
    out = ckpts.model.decode(np.asarray(tokens), queries, sampler)
    codes = np.zeros((grid, grid, layout.levels), dtype=np.int32)
    for addr, row in zip(queries, out):
        codes[addr.row, addr.col] = row
    uv = hlq_mod.decode(hlq_mod.PatchCodes((grid, grid), codes, "flow"), ckpts.hlq_flow)
    return geo.FlowField(uv, np.ones(uv.shape[:2], dtype=bool))


def run_depth_estimation(rgb0, motion, K, n_seeds, ckpts, base_seed=0,
                         temperature=1.0, top_k=50, oracle_flow=None):
    """Depth from parallax: predict flow for an in-plane probe, invert it.

    Samples ``n_seeds`` independent flow fields and aggregates their
    disparities. With ``oracle_flow`` the prediction is bypassed entirely
    (exactness check for the geometric inverse).
    """
    if not motion.in_plane:
        raise ValueError("depth estimation requires an in-plane probe motion")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    if oracle_flow is not None:
        return geo.depth_from_flow(oracle_flow, motion, K)
    maps = []
    for s in range(n_seeds):
        rng = np.random.default_rng([base_seed, s, 23])
        sampler = Sampler(temperature=temperature, top_k=top_k,
                          rng=np.random.default_rng([base_seed, s, 29]))
        flow = predict_flow_from_pose(rgb0, motion, ckpts, sampler, rng)
        maps.append(geo.depth_from_flow(flow, motion, K))
    return geo.aggregate_depth(maps)


def predict_next_rgb_from_pose(rgb0, motion, ckpts, sampler, rng):
    """RGB-only pathway: [RGB0, pose] -> RGB1, no flow intermediate."""
    layout = ckpts.layout
    rgb_codes = hlq_mod.encode(np.asarray(rgb0, dtype=np.float64), ckpts.hlq_rgb)
    tokens = [layout.bos]
    tokens += _patch_token_block(layout, rgb_codes, 0, "rgb", _all_patches(layout, rng))
    tokens += _pose_tokens(layout, 0, motion)
    image, _ = _decode_rgb_frame(ckpts, tokens, 1, sampler, rng)
    return image


def run_composite(rgb0, depth, K, steps, ckpts, sampler=None, base_seed=0,
                  reuse_depth=False):
    """Chain image-producing pathways; depth re-estimated between steps.

    Returns the list of intermediate images (one per step). ``reuse_depth``
    keeps the initial depth instead of re-estimating after each edit.
    """
    if not steps:
        raise ValueError("composite needs at least one step")
    sampler = sampler or Sampler(temperature=0.0)
    image = np.asarray(rgb0, dtype=np.float64)
    cur_depth = np.asarray(depth, dtype=np.float64)
    outputs = []
    for i, step in enumerate(steps):
        step.validate()
        rng = np.random.default_rng([base_seed, i, 31])
        try:
            if step.kind == "nvs":
                image = run_nvs(image, cur_depth, K, step.transform, ckpts,
                                sampler, rng).image
            elif step.kind == "object_edit":
                image = run_object_edit(image, cur_depth, K, step.mask,
                                        step.transform, ckpts, sampler, rng).image
            else:
                raise ValueError(f"composite steps must produce images, got {step.kind!r}")
        except Exception as e:
            raise RuntimeError(f"composite step {i} ({step.kind}) failed: {e}") from e
        outputs.append(image)
        if i + 1 < len(steps) and not reuse_depth:
            est = run_depth_estimation(image, DEPTH_PROBE, K, step.n_seeds, ckpts,
                                       base_seed=base_seed + 1000 + i)
            cur_depth = est.values
    return outputs
