"""Hierarchical local quantizer: per-patch conv autoencoder + residual VQ.

Each patch maps to four discrete codes: level 0 carries a coarse preview and
levels 1-3 quantize successive residuals. Locality is architectural — patches
are folded onto the batch axis before any convolution, so codes of patch i
cannot depend on pixels of patch j and vice versa.

Training uses a straight-through estimator through the quantizer, an L1
reconstruction loss plus a 4x-downsampled L1 term, a commitment term, and
EMA codebook updates with dead-entry reseeding.
"""

import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import arrayio
from . import numerics as nm

MAGIC = b"HLQ1"

RGB_RANGE = (0.0, 1.0)


@dataclass
class HlqConfig:
    modality: str = "rgb"          # "rgb" (3ch, [0,1]) or "flow" (2ch, [-R, R])
    patch: int = 8
    levels: int = 4
    codebook_size: int = 512
    latent_dim: int = 32
    width: int = 32
    flow_range: float = 32.0       # R; half the image width the model was built for
    steps: int = 5000
    batch_frames: int = 8
    lr: float = 1e-4
    warmup_frac: float = 0.01
    constant_frac: float = 0.0     # fraction held at peak lr before linear decay
    commitment: float = 0.25
    ema_decay: float = 0.99
    reseed_every: int = 200
    seed: int = 0
    dtype: str = "float32"

    @property
    def channels(self):
        if self.modality == "rgb":
            return 3
        if self.modality == "flow":
            return 2
        raise ValueError(f"unknown modality {self.modality!r}")


@dataclass
class PatchCodes:
    grid: tuple                    # (gy, gx)
    codes: np.ndarray              # (gy, gx, levels) int32
    modality: str

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int32)
        if self.codes.shape[:2] != tuple(self.grid):
            raise ValueError(f"codes shape {self.codes.shape} does not match grid {self.grid}")


class HlqModel:
    """Parameters plus codebooks; built fresh or loaded from a checkpoint."""

    def __init__(self, config, init_seed=None):
        self.config = config
        c = config
        dt = np.dtype(c.dtype).type
        rng = np.random.default_rng([c.seed if init_seed is None else init_seed, 17])
        w, d, p, ch = c.width, c.latent_dim, c.patch, c.channels
        flat = (p // 4) * (p // 4) * (2 * w)

        def conv_w(kh, kw, cin, cout):
            std = 1.0 / np.sqrt(kh * kw * cin)
            return nm.parameter(rng.normal(0, std, size=(kh, kw, cin, cout)), dtype=dt)

        def lin_w(cin, cout):
            return nm.parameter(rng.normal(0, 1.0 / np.sqrt(cin), size=(cin, cout)), dtype=dt)

        def bias(n):
            return nm.parameter(np.zeros(n), dtype=dt)

        self.params = {
            "enc.c1.w": conv_w(3, 3, ch, w), "enc.c1.b": bias(w),
            "enc.c2.w": conv_w(3, 3, w, 2 * w), "enc.c2.b": bias(2 * w),
            "enc.fc.w": lin_w(flat, d), "enc.fc.b": bias(d),
            "dec.fc.w": lin_w(d, flat), "dec.fc.b": bias(flat),
            "dec.c1.w": conv_w(2, 2, 2 * w, w), "dec.c1.b": bias(w),
            "dec.c2.w": conv_w(2, 2, w, w // 2), "dec.c2.b": bias(w // 2),
            "dec.out.w": conv_w(3, 3, w // 2, ch), "dec.out.b": bias(ch),
        }
        self.codebooks = [np.asarray(rng.normal(0, 0.2, size=(c.codebook_size, d)), dtype=dt)
                          for _ in range(c.levels)]
        # EMA accumulators per level
        self.cluster_size = [np.ones(c.codebook_size, dtype=np.float64) for _ in range(c.levels)]
        self.embed_avg = [cb.astype(np.float64).copy() for cb in self.codebooks]

    # -- shape plumbing ----------------------------------------------------

    def to_patches(self, field):
        c = self.config
        h, w, ch = field.shape
        p = c.patch
        if h % p or w % p:
            raise ValueError(f"field {h}x{w} not divisible by patch size {p}")
        if ch != c.channels:
            raise ValueError(f"expected {c.channels} channels for {c.modality}, got {ch}")
        gy, gx = h // p, w // p
        patches = field.reshape(gy, p, gx, p, ch).transpose(0, 2, 1, 3, 4).reshape(-1, p, p, ch)
        return patches, (gy, gx)

    def from_patches(self, patches, grid):
        gy, gx = grid
        p = self.config.patch
        ch = self.config.channels
        return patches.reshape(gy, gx, p, p, ch).transpose(0, 2, 1, 3, 4).reshape(gy * p, gx * p, ch)

    def normalize(self, patches):
        if self.config.modality == "flow":
            r = self.config.flow_range
            if np.max(np.abs(patches)) > r:
                raise ValueError(
                    f"flow magnitude {np.max(np.abs(patches)):.3f} outside quantizer range "
                    f"[-{r}, {r}]; clip before encoding")
            return patches / r
        return patches

    def denormalize(self, patches):
        if self.config.modality == "flow":
            return patches * self.config.flow_range
        return patches

    # -- forward pieces ----------------------------------------------------

    def encode_latent(self, patches_t):
        P = self.params
        h = nm.gelu(nm.add(nm.conv2d(patches_t, P["enc.c1.w"], stride=2, pad=1), P["enc.c1.b"]))
        h = nm.gelu(nm.add(nm.conv2d(h, P["enc.c2.w"], stride=2, pad=1), P["enc.c2.b"]))
        n = h.shape[0]
        h = nm.reshape(h, (n, -1))
        return nm.add(nm.matmul(h, P["enc.fc.w"]), P["enc.fc.b"])

    def decode_latent(self, z_t, n):
        P = self.params
        c = self.config
        side = c.patch // 4
        h = nm.gelu(nm.add(nm.matmul(z_t, P["dec.fc.w"]), P["dec.fc.b"]))
        h = nm.reshape(h, (n, side, side, 2 * c.width))
        h = nm.gelu(nm.add(nm.conv2d_transpose(h, P["dec.c1.w"], stride=2), P["dec.c1.b"]))
        h = nm.gelu(nm.add(nm.conv2d_transpose(h, P["dec.c2.w"], stride=2), P["dec.c2.b"]))
        return nm.add(nm.conv2d(h, P["dec.out.w"], stride=1, pad=1), P["dec.out.b"])

    def quantize(self, z):
        """Residual VQ of latents (N, D) -> (codes (N, L), quantized (N, D))."""
        residual = z.copy()
        total = np.zeros_like(z)
        codes = np.empty((z.shape[0], self.config.levels), dtype=np.int32)
        for lvl, cb in enumerate(self.codebooks):
            d2 = (residual ** 2).sum(1)[:, None] - 2.0 * residual @ cb.T + (cb ** 2).sum(1)[None, :]
            idx = np.argmin(d2, axis=1)
            q = cb[idx]
            codes[:, lvl] = idx
            total += q
            residual = residual - q
        return codes, total

    def lookup(self, codes, levels=None):
        """Sum of codebook vectors for the first ``levels`` levels."""
        levels = self.config.levels if levels is None else levels
        flat = codes.reshape(-1, self.config.levels)
        z = np.zeros((flat.shape[0], self.config.latent_dim), dtype=self.codebooks[0].dtype)
        for lvl in range(levels):
            z += self.codebooks[lvl][flat[:, lvl]]
        return z

    def clamp(self, field):
        if self.config.modality == "rgb":
            return np.clip(field, RGB_RANGE[0], RGB_RANGE[1])
        r = self.config.flow_range
        return np.clip(field, -r, r)


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------

def encode(field, model):
    """Field (H, W, C) -> per-patch code indices."""
    field = np.asarray(field, dtype=np.float64)
    patches, grid = model.to_patches(field)
    patches = model.normalize(patches)
    with nm.no_grad():
        z = model.encode_latent(nm.tensor(patches, dtype=model.codebooks[0].dtype)).data
    codes, _ = model.quantize(z)
    return PatchCodes(grid=grid, codes=codes.reshape(grid[0], grid[1], -1),
                      modality=model.config.modality)


def decode(codes, model, levels=None):
    """Per-patch codes -> field (H, W, C), clamped to the modality range."""
    c = model.config
    if codes.codes.max() >= c.codebook_size or codes.codes.min() < 0:
        raise ValueError(f"code index outside codebook of size {c.codebook_size}")
    flat = codes.codes.reshape(-1, c.levels)
    z = model.lookup(flat, levels=levels)
    with nm.no_grad():
        patches = model.decode_latent(nm.tensor(z, dtype=z.dtype), flat.shape[0]).data
    patches = model.denormalize(patches)
    field = model.from_patches(patches, codes.grid)
    return model.clamp(field)


def _lowres_kernel(channels, factor, dtype):
    k = np.zeros((factor, factor, channels, channels))
    for c in range(channels):
        k[:, :, c, c] = 1.0 / (factor * factor)
    return nm.tensor(k, dtype=dtype)


def train_step(model, x, rng):
    """One optimisation-ready forward/backward over pre-normalized patches.

    ``x`` is (N, p, p, C) already in model range. Returns (loss_tensor,
    codes, latents); caller applies the optimizer. EMA codebook statistics
    update inside.
    """
    c = model.config
    dt = model.codebooks[0].dtype
    xt = nm.tensor(x, dtype=dt)

    z = model.encode_latent(xt)
    codes, q = model.quantize(z.data)
    zq = nm.add(z, nm.tensor(q - z.data, dtype=dt))          # straight-through
    commit = nm.mse(z, nm.tensor(q, dtype=dt))
    recon = model.decode_latent(zq, x.shape[0])

    loss = nm.l1(recon, xt)
    pool = _lowres_kernel(c.channels, 4, dt)
    low = nm.l1(nm.conv2d(recon, pool, stride=4), nm.conv2d(xt, pool, stride=4))
    loss = nm.add(loss, low)
    loss = nm.add(loss, nm.scale(commit, c.commitment))

    _ema_update(model, z.data, codes)
    return loss, codes, z.data


def _ema_update(model, z, codes):
    c = model.config
    decay = c.ema_decay
    residual = z.astype(np.float64).copy()
    for lvl in range(c.levels):
        cb = model.codebooks[lvl]
        idx = codes[:, lvl]
        onehot_counts = np.bincount(idx, minlength=c.codebook_size).astype(np.float64)
        sums = np.zeros((c.codebook_size, c.latent_dim))
        np.add.at(sums, idx, residual)
        model.cluster_size[lvl] = decay * model.cluster_size[lvl] + (1 - decay) * onehot_counts
        model.embed_avg[lvl] = decay * model.embed_avg[lvl] + (1 - decay) * sums
        n = model.cluster_size[lvl].sum()
        smoothed = (model.cluster_size[lvl] + 1e-5) / (n + c.codebook_size * 1e-5) * n
        model.codebooks[lvl] = (model.embed_avg[lvl] / smoothed[:, None]).astype(cb.dtype)
        residual = residual - model.codebooks[lvl][idx].astype(np.float64)


def _reseed_dead(model, z, rng):
    c = model.config
    for lvl in range(c.levels):
        usage = model.cluster_size[lvl]
        dead = usage < 0.01 * max(usage.mean(), 1e-12)
        k = int(dead.sum())
        if k == 0:
            continue
        picks = rng.integers(0, z.shape[0], size=k)
        fresh = z[picks].astype(np.float64) + rng.normal(0, 1e-3, size=(k, c.latent_dim))
        model.codebooks[lvl][dead] = fresh.astype(model.codebooks[lvl].dtype)
        model.embed_avg[lvl][dead] = fresh
        model.cluster_size[lvl][dead] = max(usage.mean(), 1e-2)


def _lr_at(step, cfg):
    warm = max(int(cfg.steps * cfg.warmup_frac), 1)
    hold = int(cfg.steps * cfg.constant_frac)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if step < warm + hold:
        return cfg.lr
    span = max(cfg.steps - warm - hold, 1)
    return cfg.lr * max(0.0, 1.0 - (step - warm - hold) / span)


def training_fields(dataset, modality, split="train"):
    """All fields of one modality from a dataset split, in memory."""
    out = []
    for sid in dataset.scene_ids(split):
        if modality == "rgb":
            for t in range(dataset.frames_per_scene):
                out.append(dataset.rgb(sid, t).astype(np.float64))
        else:
            for t in range(dataset.frames_per_scene - 1):
                out.append(dataset.flow(sid, t).uv.copy())
    return out


def train_hlq(dataset, config, log=None):
    """Train a quantizer on a dataset split; returns the model and loss log."""
    if config.modality == "flow":
        config.flow_range = dataset.image_size / 2.0
    fields = training_fields(dataset, config.modality)
    if config.modality == "flow":
        fields = [np.clip(f, -config.flow_range, config.flow_range) for f in fields]
    model = HlqModel(config)
    dt = model.codebooks[0].dtype
    stacks = []
    for f in fields:
        patches, _ = model.to_patches(np.asarray(f, dtype=np.float64))
        stacks.append(model.normalize(patches).astype(dt))
    all_patches = np.stack(stacks)            # (F, G*G, p, p, C)
    opt = nm.AdamW(model.params, lr=config.lr, weight_decay=0.0)
    losses = []
    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step, 3])
        picks = rng.integers(0, len(fields), size=config.batch_frames)
        x = all_patches[picks].reshape(-1, config.patch, config.patch, config.channels)
        opt.zero_grad()
        loss, codes, z = train_step(model, x, rng)
        val = float(loss.data)
        if not np.isfinite(val):
            raise RuntimeError(f"hlq training diverged at step {step}: loss={val}")
        nm.backward(loss)
        opt.step(lr=_lr_at(step, config))
        if config.reseed_every and (step + 1) % config.reseed_every == 0:
            _reseed_dead(model, z, rng)
        losses.append(val)
        if log and (step % 100 == 0 or step == config.steps - 1):
            log(step, val, _lr_at(step, config))
    return model, losses


# --------------------------------------------------------------------------
# Checkpoint IO
# --------------------------------------------------------------------------

def save_hlq(path, model):
    cfg_pairs = [f"{k} = {v}" for k, v in sorted(asdict(model.config).items())]
    cfg_text = "\n".join(cfg_pairs).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(cfg_text)))
        f.write(cfg_text)
        arrays = {k: p.data for k, p in model.params.items()}
        for lvl in range(model.config.levels):
            arrays[f"codebook.{lvl}"] = model.codebooks[lvl]
            arrays[f"ema.cluster.{lvl}"] = model.cluster_size[lvl]
            arrays[f"ema.avg.{lvl}"] = model.embed_avg[lvl]
        arrayio.write_blocks(f, arrays)


def _config_from_text(text, cls):
    fields = {}
    for line in text.splitlines():
        k, _, v = line.partition("=")
        k, v = k.strip(), v.strip()
        fields[k] = v
    kwargs = {}
    for name, ftype in cls.__annotations__.items():
        if name not in fields:
            continue
        raw = fields[name]
        if ftype is int:
            kwargs[name] = int(raw)
        elif ftype is float:
            kwargs[name] = float(raw)
        else:
            kwargs[name] = raw
    return cls(**kwargs)


def load_hlq(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not an HLQ1 checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        config = _config_from_text(f.read(n).decode("utf-8"), HlqConfig)
        arrays = arrayio.read_blocks(f)
    model = HlqModel(config)
    for k in model.params:
        model.params[k] = nm.parameter(arrays[k], dtype=arrays[k].dtype)
    for lvl in range(config.levels):
        model.codebooks[lvl] = arrays[f"codebook.{lvl}"]
        model.cluster_size[lvl] = arrays[f"ema.cluster.{lvl}"].astype(np.float64)
        model.embed_avg[lvl] = arrays[f"ema.avg.{lvl}"].astype(np.float64)
    return model
