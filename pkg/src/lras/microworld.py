"""Synthetic layered-plane scene generator with exact ground truth.

Scenes are fronto-parallel textured planes (background layers plus
rectangular object billboards). Every quantity the pipeline needs — RGB,
depth, dense flow, object masks, poses — has a closed form.

Exactness design: depths are powers of two, the focal length equals the
image width, camera translations are multiples of one texel (``Z_max / f``
world units) and object translations are multiples of ``Z_obj / f``. All
ray-plane intersections then land on dyadic rationals, texture lookups are
exact, and warping frame0 by the ground-truth flow reproduces frame1
bit-for-bit on non-occluded pixels. Texel size is constant in world units,
so nearer surfaces show coarser texture: an honest monocular depth cue.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import uniform_filter

from . import arrayio
from .geometry import CameraIntrinsics, RigidTransform, FlowField

MANIFEST_VERSION = "1"


# --------------------------------------------------------------------------
# Specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    texture_seed: int
    depth: float
    extent: tuple = None      # (x0, y0, x1, y1) world units; None = infinite


@dataclass(frozen=True)
class ObjectSpec:
    texture_seed: int
    footprint: tuple          # (w, h) world units
    center: tuple             # (x, y) world units at canonical pose
    depth: float
    color_key: int            # unique object id, > 0


@dataclass(frozen=True)
class SceneSpec:
    image_size: int
    layers: tuple
    objects: tuple
    intrinsics: CameraIntrinsics
    rng_seed: int


@dataclass
class Texture:
    values: np.ndarray        # (S, S, 3) float32 texels
    spacing: float            # world units per texel
    origin: tuple             # world (x, y) of texel (0, 0) corner


@dataclass
class Scene:
    spec: SceneSpec
    layer_textures: list
    object_textures: dict     # color_key -> Texture

    @property
    def image_size(self):
        return self.spec.image_size

    def canonical_object_poses(self):
        return {o.color_key: RigidTransform(np.eye(3), [o.center[0], o.center[1], o.depth])
                for o in self.spec.objects}


@dataclass
class Frame:
    rgb: np.ndarray           # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray         # (H, W) float64, positive
    masks: np.ndarray         # (H, W) int32 object ids, 0 = background
    camera_pose: RigidTransform
    object_poses: dict
    # internals used by the flow oracle
    surface: np.ndarray = None   # int32: -(layer_index+1) or object id
    points: np.ndarray = None    # (H, W, 3): world point (layers) / object-frame point


# --------------------------------------------------------------------------
# Texture generation
# --------------------------------------------------------------------------

def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _make_texture(rng, size, base_color, noise_amp, blur, n_flat):
    noise = rng.uniform(-1.0, 1.0, size=(size, size, 3))
    for c in range(3):
        noise[:, :, c] = uniform_filter(noise[:, :, c], size=blur, mode="wrap")
    peak = np.abs(noise).max()
    if peak > 0:
        noise *= noise_amp / peak
    tex = np.asarray(base_color)[None, None, :] + noise
    for _ in range(n_flat):
        rw = int(rng.integers(size // 8, size // 3 + 1))
        rh = int(rng.integers(size // 8, size // 3 + 1))
        ry = int(rng.integers(0, size - rh + 1))
        rx = int(rng.integers(0, size - rw + 1))
        flat = np.clip(np.asarray(base_color) + rng.uniform(-0.22, 0.22, size=3), 0.05, 0.95)
        tex[ry:ry + rh, rx:rx + rw, :] = flat
    return np.clip(tex, 0.02, 0.98).astype(np.float32)


def object_palette(color_key):
    """Well-separated base color per object id (golden-ratio hue walk)."""
    hue = (0.11 + 0.618033988749895 * color_key) % 1.0
    return _hsv_to_rgb(hue, 0.7, 0.8)


def generate_scene(spec):
    """Instantiate textures for a scene spec; pure function of the spec."""
    if not spec.layers:
        raise ValueError("scene needs at least one background layer")
    depths = [l.depth for l in spec.layers]
    if len(set(depths)) != len(depths):
        raise ValueError(f"layer depths must be distinct, got {depths}")
    keys = [o.color_key for o in spec.objects]
    if len(set(keys)) != len(keys):
        raise ValueError(f"object color keys must be unique, got {keys}")
    if any(k <= 0 for k in keys):
        raise ValueError("object color keys must be positive")
    if any(l.depth <= 0 for l in spec.layers) or any(o.depth <= 0 for o in spec.objects):
        raise ValueError("surface depths must be positive")

    texel = texel_spacing(spec.image_size)
    f = spec.intrinsics.fx
    layer_textures = []
    for layer in spec.layers:
        rng = np.random.default_rng([spec.rng_seed, layer.texture_seed])
        # cover the view frustum at this depth plus camera travel, wrap beyond
        half = 0.5 * layer.depth + 1.0
        size = int(np.ceil(2 * half / texel))
        hue_rng = rng.uniform(0, 1)
        base = _hsv_to_rgb(hue_rng, 0.3, 0.55)
        values = _make_texture(rng, size, base, noise_amp=0.16, blur=6, n_flat=3)
        layer_textures.append(Texture(values, texel, (-half, -half)))

    object_textures = {}
    for obj in spec.objects:
        rng = np.random.default_rng([spec.rng_seed, obj.texture_seed])
        rng.uniform(0, 1)  # keep streams distinct from layer usage
        w, h = obj.footprint
        size = max(int(np.ceil(max(w, h) / texel)), 2)
        base = object_palette(obj.color_key)
        values = _make_texture(rng, size, base, noise_amp=0.22, blur=4, n_flat=2)
        object_textures[obj.color_key] = Texture(values, texel, (-w / 2.0, -h / 2.0))
    return Scene(spec, layer_textures, object_textures)


def texel_spacing(image_size):
    """World units per texel: one pixel footprint at the reference depth 8."""
    return 8.0 / float(image_size)


def default_intrinsics(image_size):
    f = float(image_size)
    c = (image_size - 1) / 2.0
    return CameraIntrinsics(f, f, c, c)


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def _lookup(texture, x, y):
    inv = 1.0 / texture.spacing
    ix = np.floor((x - texture.origin[0]) * inv).astype(np.int64)
    iy = np.floor((y - texture.origin[1]) * inv).astype(np.int64)
    s = texture.values.shape[0]
    return texture.values[iy % s, ix % s, :]


def render(scene, camera_pose, object_poses=None, exclude=()):
    """Z-buffered pinhole render; nearest surface wins, objects win ties.

    ``object_poses`` maps color_key -> object-to-world RigidTransform and
    defaults to the canonical poses. ``exclude`` skips object ids (used for
    amodal background references).
    """
    spec = scene.spec
    K = spec.intrinsics
    n = spec.image_size
    if object_poses is None:
        object_poses = scene.canonical_object_poses()

    R, t = camera_pose.R, camera_pose.t
    center = -R.T @ t
    for layer in spec.layers:
        if center[2] == layer.depth:
            raise ValueError(f"camera lies exactly on the layer plane z={layer.depth}")
    if center[2] >= max(l.depth for l in spec.layers):
        raise ValueError("camera is at or behind the backmost layer")

    v, u = np.mgrid[0:n, 0:n]
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones((n, n))], axis=-1)
    d_world = d_cam @ R  # R^T applied per pixel

    best = np.full((n, n), np.inf)
    rgb = np.zeros((n, n, 3), dtype=np.float32)
    surface = np.zeros((n, n), dtype=np.int32)
    points = np.zeros((n, n, 3))
    any_layer = False

    order = sorted(range(len(spec.layers)), key=lambda i: -spec.layers[i].depth)
    for i in order:
        layer = spec.layers[i]
        dz = d_world[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (layer.depth - center[2]) / dz
        hit = np.isfinite(s) & (s > 0)
        x = center[0] + s * d_world[..., 0]
        y = center[1] + s * d_world[..., 1]
        if layer.extent is not None:
            x0, y0, x1, y1 = layer.extent
            hit &= (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
        win = hit & (s <= best)
        if win.any():
            any_layer = True
            best[win] = s[win]
            rgb[win] = _lookup(scene.layer_textures[i], x[win], y[win])
            surface[win] = -(i + 1)
            points[win] = np.stack([x[win], y[win], np.full(win.sum(), layer.depth)], axis=-1)

    if not any_layer:
        raise ValueError("camera sees no background layer")

    obj_order = sorted(spec.objects, key=lambda o: (-o.depth, o.color_key))
    for obj in obj_order:
        if obj.color_key in exclude:
            continue
        pose = object_poses[obj.color_key]
        oo = pose.R.T @ (center - pose.t)
        do = d_world @ pose.R
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -oo[2] / do[..., 2]
        hit = np.isfinite(s) & (s > 0)
        xo = oo[0] + s * do[..., 0]
        yo = oo[1] + s * do[..., 1]
        w2, h2 = obj.footprint[0] / 2.0, obj.footprint[1] / 2.0
        hit &= (xo >= -w2) & (xo < w2) & (yo >= -h2) & (yo < h2)
        win = hit & (s <= best)
        if win.any():
            best[win] = s[win]
            rgb[win] = _lookup(scene.object_textures[obj.color_key], xo[win], yo[win])
            surface[win] = obj.color_key
            points[win] = np.stack([xo[win], yo[win], np.zeros(win.sum())], axis=-1)

    if not np.all(np.isfinite(best)):
        raise ValueError("some pixels hit no surface; scenes need a full-coverage back layer")

    masks = np.where(surface > 0, surface, 0).astype(np.int32)
    return Frame(rgb=rgb, depth=best, masks=masks, camera_pose=camera_pose,
                 object_poses=dict(object_poses), surface=surface, points=points)


def ground_truth_flow(scene, pose0, pose1, object_poses0=None, object_poses1=None):
    """Analytic flow frame0 -> frame1 with occlusion-aware validity."""
    f0 = render(scene, pose0, object_poses0)
    f1 = render(scene, pose1, object_poses1)
    K = scene.spec.intrinsics
    n = scene.spec.image_size
    if object_poses1 is None:
        object_poses1 = scene.canonical_object_poses()

    pts_w = f0.points.copy()
    for obj in scene.spec.objects:
        sel = f0.surface == obj.color_key
        if sel.any():
            pts_w[sel] = object_poses1[obj.color_key].apply(f0.points[sel])
    p1 = pose1.apply(pts_w)
    z1 = p1[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u1 = K.fx * p1[..., 0] / z1 + K.cx
        v1 = K.fy * p1[..., 1] / z1 + K.cy
    v, u = np.mgrid[0:n, 0:n]
    flow = np.stack([u1 - u, v1 - v], axis=-1)

    iu = np.floor(u1 + 0.5).astype(np.int64)
    iv = np.floor(v1 + 0.5).astype(np.int64)
    inb = (z1 > 0) & (iu >= 0) & (iu < n) & (iv >= 0) & (iv < n)
    valid = np.zeros((n, n), dtype=bool)
    valid[inb] = f1.surface[iv[inb], iu[inb]] == f0.surface[inb]
    flow = np.where((z1 > 0)[..., None], flow, 0.0)
    return FlowField(flow, valid)


# --------------------------------------------------------------------------
# Scene and motion sampling
# --------------------------------------------------------------------------

@dataclass
class WorldConfig:
    image_size: int = 64
    scenes: int = 500
    frames: int = 4
    layer_depths: tuple = (2.0, 4.0, 8.0)
    objects_min: int = 1
    objects_max: int = 3
    object_depths: tuple = (1.0, 2.0, 4.0)
    object_depth_probs: tuple = (0.25, 0.4, 0.35)
    # motion distribution: camera steps in texel units, object moves in pixels
    cam_step_choices: tuple = (1, 1, 1, 1, 1, 1, 1, 2)
    p_cam_diagonal: float = 0.12
    obj_move_px_min: int = 3
    obj_move_px_max: int = 7
    category_probs: tuple = (0.37, 0.3, 0.13, 0.2)   # camera / object / both / static
    max_flow_frac: float = 0.25
    val_scenes: int = 50
    test_scenes: int = 50
    seed: int = 1234

    def validate(self):
        if self.frames < 2 or self.frames > 4:
            raise ValueError("frames per scene must be in 2..4")
        if self.scenes <= self.val_scenes + self.test_scenes:
            raise ValueError("not enough scenes for the requested splits")
        if abs(sum(self.category_probs) - 1.0) > 1e-9:
            raise ValueError("category probabilities must sum to 1")


def _snap(value, step):
    return np.round(value / step) * step


def sample_scene_spec(cfg, scene_index):
    """Deterministic scene spec for (config seed, scene index)."""
    rng = np.random.default_rng([cfg.seed, scene_index, 0])
    f = float(cfg.image_size)
    texel = texel_spacing(cfg.image_size)
    layers = []
    for i, depth in enumerate(sorted(cfg.layer_depths)):
        if depth == max(cfg.layer_depths):
            extent = None
        else:
            half_view = 0.5 * depth
            hw = _snap(rng.uniform(0.15, 0.35) * depth, 1 / 64)
            hh = _snap(rng.uniform(0.15, 0.35) * depth, 1 / 64)
            cx = _snap(rng.uniform(-0.25, 0.25) * depth, 1 / 64)
            cy = _snap(rng.uniform(-0.25, 0.25) * depth, 1 / 64)
            extent = (cx - hw, cy - hh, cx + hw, cy + hh)
        layers.append(LayerSpec(texture_seed=int(rng.integers(1, 2 ** 31)), depth=depth,
                                extent=extent))

    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    objects = []
    for k in range(n_obj):
        depth = float(rng.choice(cfg.object_depths, p=cfg.object_depth_probs))
        apx_w = int(rng.integers(12, 25))
        apx_h = int(rng.integers(12, 25))
        w = apx_w * depth / f
        h = apx_h * depth / f
        lim = 0.35 * depth
        cx = _snap(rng.uniform(-lim, lim), depth / f)
        cy = _snap(rng.uniform(-lim, lim), depth / f)
        objects.append(ObjectSpec(texture_seed=int(rng.integers(1, 2 ** 31)),
                                  footprint=(w, h), center=(cx, cy), depth=depth,
                                  color_key=k + 1))
    return SceneSpec(image_size=cfg.image_size, layers=tuple(layers),
                     objects=tuple(objects), intrinsics=default_intrinsics(cfg.image_size),
                     rng_seed=int(rng.integers(1, 2 ** 31)))


def _max_flow_px(spec, cam_delta, obj_moves):
    """Analytic bound on flow magnitude for one transition."""
    f = spec.intrinsics.fx
    worst = 0.0
    for surf_depth in [l.depth for l in spec.layers] + [o.depth for o in spec.objects]:
        worst = max(worst, f * np.hypot(cam_delta[0], cam_delta[1]) / surf_depth)
    for o in spec.objects:
        mv = obj_moves.get(o.color_key, (0.0, 0.0))
        total = np.hypot(cam_delta[0] + mv[0], cam_delta[1] + mv[1])
        worst = max(worst, f * total / o.depth)
    return worst


def _sample_cam_delta(rng, cfg, texel):
    k = int(rng.choice(cfg.cam_step_choices))
    if rng.uniform() < cfg.p_cam_diagonal:
        sx, sy = rng.choice([-1, 1]), rng.choice([-1, 1])
        return (sx * texel, sy * texel)
    axis = rng.integers(0, 2)
    sign = rng.choice([-1, 1])
    d = [0.0, 0.0]
    d[axis] = float(sign * k * texel)
    return tuple(d)


def sample_motion(scene, rng, cfg, category=None):
    """Per-frame camera poses and object poses for one scene trajectory.

    Returns (category, camera_poses, object_poses_per_frame). World->camera
    translation accumulates in dyadic steps so every flow is integer-pixel.
    """
    spec = scene.spec
    cats = ["camera", "object", "both", "static"]
    if category is None:
        category = cats[int(rng.choice(4, p=cfg.category_probs))]
    if category in ("object", "both") and not spec.objects:
        category = "camera"
    texel = texel_spacing(spec.image_size)
    f = spec.intrinsics.fx
    mover = None
    if category in ("object", "both") and spec.objects:
        mover = spec.objects[int(rng.integers(0, len(spec.objects)))]

    cam_t = np.zeros(3)
    obj_centers = {o.color_key: np.array([o.center[0], o.center[1], o.depth]) for o in spec.objects}
    cam_poses = [RigidTransform(np.eye(3), cam_t.copy())]
    obj_poses = [{k: RigidTransform(np.eye(3), c.copy()) for k, c in obj_centers.items()}]

    for _ in range(cfg.frames - 1):
        for _attempt in range(64):
            cam_delta = (0.0, 0.0)
            if category in ("camera", "both"):
                cam_delta = _sample_cam_delta(rng, cfg, texel)
            obj_moves = {}
            if mover is not None:
                mag = rng.integers(cfg.obj_move_px_min, cfg.obj_move_px_max + 1)
                ang = rng.uniform(0, 2 * np.pi)
                mx = int(np.round(mag * np.cos(ang)))
                my = int(np.round(mag * np.sin(ang)))
                if mx == 0 and my == 0:
                    mx = int(mag)
                obj_moves[mover.color_key] = (mx * mover.depth / f, my * mover.depth / f)
            if _max_flow_px(spec, cam_delta, obj_moves) <= cfg.max_flow_frac * spec.image_size:
                break
        cam_t = cam_t + np.array([cam_delta[0], cam_delta[1], 0.0])
        for key, mv in obj_moves.items():
            obj_centers[key] = obj_centers[key] + np.array([mv[0], mv[1], 0.0])
        cam_poses.append(RigidTransform(np.eye(3), cam_t.copy()))
        obj_poses.append({k: RigidTransform(np.eye(3), c.copy()) for k, c in obj_centers.items()})
    return category, cam_poses, obj_poses


def scene_from_index(cfg, scene_index):
    """Scene plus its dataset trajectory, reproducible from config alone."""
    spec = sample_scene_spec(cfg, scene_index)
    scene = generate_scene(spec)
    rng = np.random.default_rng([cfg.seed, scene_index, 1])
    category, cam_poses, obj_poses = sample_motion(scene, rng, cfg)
    return scene, category, cam_poses, obj_poses


# --------------------------------------------------------------------------
# Dataset building
# --------------------------------------------------------------------------

def _scene_dir(root, scene_index):
    return os.path.join(root, f"scene_{scene_index:05d}")


def _write_scene(args):
    cfg, scene_index, root = args
    scene, category, cam_poses, obj_poses = scene_from_index(cfg, scene_index)
    d = _scene_dir(root, scene_index)
    os.makedirs(d, exist_ok=True)
    frames = []
    for t in range(cfg.frames):
        fr = render(scene, cam_poses[t], obj_poses[t])
        frames.append(fr)
        arrayio.write_array(os.path.join(d, f"rgb_{t}.bin"), fr.rgb)
        arrayio.write_array(os.path.join(d, f"depth_{t}.bin"), fr.depth)
        arrayio.write_array(os.path.join(d, f"mask_{t}.bin"), fr.masks.astype(np.float32))
        from .geometry import save_transform
        save_transform(os.path.join(d, f"pose_{t}.txt"), cam_poses[t])
    stats = []
    for t in range(cfg.frames - 1):
        fl = ground_truth_flow(scene, cam_poses[t], cam_poses[t + 1],
                               obj_poses[t], obj_poses[t + 1])
        packed = np.concatenate([fl.uv, fl.valid[..., None].astype(np.float64)], axis=-1)
        arrayio.write_array(os.path.join(d, f"flow_{t}_{t + 1}.bin"), packed)
        stats.append(float(fl.valid.mean()))
    return scene_index, category, stats


def build_dataset(cfg, out_dir, force=False, workers=1):
    """Render the configured scene set to a dataset directory with manifest."""
    cfg.validate()
    if os.path.exists(out_dir) and os.listdir(out_dir):
        if not force:
            raise FileExistsError(f"{out_dir} exists; pass force=True to overwrite")
    os.makedirs(out_dir, exist_ok=True)

    jobs = [(cfg, i, out_dir) for i in range(cfg.scenes)]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_write_scene, jobs, chunksize=8):
                results.append(res)
    else:
        for job in jobs:
            results.append(_write_scene(job))
    results.sort()
    categories = {idx: cat for idx, cat, _ in results}
    valid_fracs = [v for _, _, stats in results for v in stats]

    order = np.random.default_rng([cfg.seed, 2]).permutation(cfg.scenes)
    val = sorted(int(i) for i in order[:cfg.val_scenes])
    test = sorted(int(i) for i in order[cfg.val_scenes:cfg.val_scenes + cfg.test_scenes])
    train = sorted(int(i) for i in order[cfg.val_scenes + cfg.test_scenes:])

    pairs = [("version", MANIFEST_VERSION),
             ("scenes", cfg.scenes),
             ("frames", cfg.frames),
             ("image_size", cfg.image_size),
             ("mean_flow_valid", f"{np.mean(valid_fracs):.6f}" if valid_fracs else "1.0"),
             ("split.train", ",".join(map(str, train))),
             ("split.val", ",".join(map(str, val))),
             ("split.test", ",".join(map(str, test))),
             ("categories", ",".join(f"{i}:{categories[i]}" for i in range(cfg.scenes)))]
    for k, v in sorted(asdict(cfg).items()):
        pairs.append((f"config.{k}", v))
    arrayio.write_kv(os.path.join(out_dir, "manifest"), pairs)
    return out_dir


def _parse_config_value(text):
    text = text.strip()
    if text.startswith("(") and text.endswith(")"):
        inner = text[1:-1].strip().rstrip(",")
        return tuple(_parse_config_value(x) for x in inner.split(",")) if inner else ()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


class Dataset:
    """Read access to a built dataset directory plus scene regeneration."""

    def __init__(self, root):
        self.root = root
        kv = dict(arrayio.read_kv(os.path.join(root, "manifest")))
        if kv.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported dataset version {kv.get('version')!r}")
        self.manifest = kv
        self.frames_per_scene = int(kv["frames"])
        self.image_size = int(kv["image_size"])
        self.splits = {name: [int(x) for x in kv[f"split.{name}"].split(",") if x != ""]
                       for name in ("train", "val", "test")}
        self.categories = dict(item.split(":") for item in kv["categories"].split(","))
        fields_ = {k[len("config."):]: _parse_config_value(v)
                   for k, v in kv.items() if k.startswith("config.")}
        self.config = WorldConfig(**fields_)

    def scene_ids(self, split):
        return list(self.splits[split])

    def rgb(self, scene, t):
        return arrayio.read_array(os.path.join(_scene_dir(self.root, scene), f"rgb_{t}.bin"))

    def depth(self, scene, t):
        return arrayio.read_array(os.path.join(_scene_dir(self.root, scene), f"depth_{t}.bin")).astype(np.float64)

    def mask(self, scene, t):
        return arrayio.read_array(os.path.join(_scene_dir(self.root, scene), f"mask_{t}.bin")).astype(np.int32)

    def pose(self, scene, t):
        from .geometry import load_transform
        return load_transform(os.path.join(_scene_dir(self.root, scene), f"pose_{t}.txt"))

    def flow(self, scene, t):
        arr = arrayio.read_array(os.path.join(_scene_dir(self.root, scene), f"flow_{t}_{t + 1}.bin"))
        return FlowField(arr[..., :2].astype(np.float64), arr[..., 2] > 0.5)

    def regenerate(self, scene):
        """Rebuild the Scene object and trajectory behind a scene directory."""
        return scene_from_index(self.config, scene)
