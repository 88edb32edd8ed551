"""Pointer-value serialization of encoded scenes into trainable token streams.

Every patch-sized variable gets a pointer token (its spatiotemporal address)
followed by its content tokens: four quantizer codes for visual patches, six
bin tokens for a camera motion. Sequences start with BOS. Supervision follows
the training rules: content of every frame after the first and all flow
content is supervised; frame-0 RGB content, camera-pose content, pointer
tokens, and BOS never are.

Visible-token ratios choose which patches appear at all; omitted patches are
simply absent. Patch order inside each group is uniformly random (the default)
or raster (kept as an ablation flag).
"""

from dataclasses import dataclass, field, replace

import numpy as np

POSE_DIMS = 6
POSE_T_RANGE = 0.5          # world units, symmetric
POSE_R_RANGE = np.pi / 4.0  # radians, symmetric


@dataclass(frozen=True)
class PointerAddress:
    t: int
    modality: str            # "rgb" | "flow" | "camera"
    row: int = 0
    col: int = 0


@dataclass(frozen=True)
class SequenceLayout:
    """Disjoint token-id ranges; written into model checkpoints verbatim."""

    grid: int = 8
    frames: int = 4
    levels: int = 4
    rgb_codebook: int = 512
    flow_codebook: int = 512
    pose_bins: int = 256

    # -- pointer ids --------------------------------------------------------

    @property
    def bos(self):
        return 0

    @property
    def mask_query(self):
        return 1

    @property
    def pointer_base(self):
        return 2

    @property
    def n_rgb_pointers(self):
        return self.frames * self.grid * self.grid

    @property
    def n_flow_pointers(self):
        return (self.frames - 1) * self.grid * self.grid

    @property
    def n_pointers(self):
        return self.n_rgb_pointers + self.n_flow_pointers + (self.frames - 1)

    def address_to_flat(self, addr):
        g = self.grid
        if addr.modality == "rgb":
            if not (0 <= addr.t < self.frames and 0 <= addr.row < g and 0 <= addr.col < g):
                raise ValueError(f"address out of range: {addr}")
            return addr.t * g * g + addr.row * g + addr.col
        if addr.modality == "flow":
            if not (0 <= addr.t < self.frames - 1 and 0 <= addr.row < g and 0 <= addr.col < g):
                raise ValueError(f"address out of range: {addr}")
            return self.n_rgb_pointers + addr.t * g * g + addr.row * g + addr.col
        if addr.modality == "camera":
            if not 0 <= addr.t < self.frames - 1:
                raise ValueError(f"address out of range: {addr}")
            return self.n_rgb_pointers + self.n_flow_pointers + addr.t
        raise ValueError(f"unknown modality {addr.modality!r}")

    def flat_to_address(self, flat):
        if not 0 <= flat < self.n_pointers:
            raise ValueError(f"flat pointer id {flat} out of range")
        g = self.grid
        if flat < self.n_rgb_pointers:
            t, rem = divmod(flat, g * g)
            return PointerAddress(t, "rgb", rem // g, rem % g)
        flat -= self.n_rgb_pointers
        if flat < self.n_flow_pointers:
            t, rem = divmod(flat, g * g)
            return PointerAddress(t, "flow", rem // g, rem % g)
        return PointerAddress(flat - self.n_flow_pointers, "camera")

    def pointer_token(self, addr):
        return self.pointer_base + self.address_to_flat(addr)

    # -- content ids --------------------------------------------------------

    @property
    def rgb_code_base(self):
        return self.pointer_base + self.n_pointers

    @property
    def flow_code_base(self):
        return self.rgb_code_base + self.levels * self.rgb_codebook

    @property
    def pose_base(self):
        return self.flow_code_base + self.levels * self.flow_codebook

    @property
    def vocab_size(self):
        return self.pose_base + self.pose_bins

    def rgb_code_token(self, level, value):
        return self.rgb_code_base + level * self.rgb_codebook + int(value)

    def flow_code_token(self, level, value):
        return self.flow_code_base + level * self.flow_codebook + int(value)

    def pose_token(self, bin_index):
        return self.pose_base + int(bin_index)

    def content_range(self, modality, level):
        """Legal [lo, hi) token range for a content position."""
        if modality == "rgb":
            lo = self.rgb_code_base + level * self.rgb_codebook
            return lo, lo + self.rgb_codebook
        if modality == "flow":
            lo = self.flow_code_base + level * self.flow_codebook
            return lo, lo + self.flow_codebook
        if modality == "camera":
            return self.pose_base, self.pose_base + self.pose_bins
        raise ValueError(f"unknown modality {modality!r}")

    def classify(self, token):
        """Token id -> (kind, level_or_dim, value); every id has exactly one."""
        if token == self.bos:
            return ("bos", 0, 0)
        if token == self.mask_query:
            return ("mask_query", 0, 0)
        if self.pointer_base <= token < self.rgb_code_base:
            return ("pointer", 0, token - self.pointer_base)
        if self.rgb_code_base <= token < self.flow_code_base:
            level, value = divmod(token - self.rgb_code_base, self.rgb_codebook)
            return ("rgb_code", level, value)
        if self.flow_code_base <= token < self.pose_base:
            level, value = divmod(token - self.flow_code_base, self.flow_codebook)
            return ("flow_code", level, value)
        if self.pose_base <= token < self.vocab_size:
            return ("pose", 0, token - self.pose_base)
        raise ValueError(f"token id {token} outside vocabulary of size {self.vocab_size}")

    def to_pairs(self):
        return [("grid", self.grid), ("frames", self.frames), ("levels", self.levels),
                ("rgb_codebook", self.rgb_codebook), ("flow_codebook", self.flow_codebook),
                ("pose_bins", self.pose_bins)]

    @staticmethod
    def from_pairs(pairs):
        d = {k: int(v) for k, v in pairs}
        return SequenceLayout(**d)


def pose_bins_from_components(components, layout):
    """Quantize six motion components into uniform bins over fixed ranges."""
    comps = np.asarray(components, dtype=np.float64)
    if comps.shape != (POSE_DIMS,):
        raise ValueError(f"expected {POSE_DIMS} pose components, got {comps.shape}")
    ranges = np.array([POSE_T_RANGE] * 3 + [POSE_R_RANGE] * 3)
    frac = (comps + ranges) / (2.0 * ranges)
    bins = np.floor(frac * layout.pose_bins).astype(np.int64)
    return np.clip(bins, 0, layout.pose_bins - 1)


def pose_components_from_bins(bins, layout):
    """Bin centers; the inverse of pose binning up to quantization."""
    ranges = np.array([POSE_T_RANGE] * 3 + [POSE_R_RANGE] * 3)
    frac = (np.asarray(bins) + 0.5) / layout.pose_bins
    return frac * 2.0 * ranges - ranges


# --------------------------------------------------------------------------
# Sequences
# --------------------------------------------------------------------------

@dataclass
class TokenSequence:
    tokens: np.ndarray          # int32
    supervised: np.ndarray      # bool, same length
    layout: SequenceLayout

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int32)
        self.supervised = np.asarray(self.supervised, dtype=bool)
        if self.tokens.shape != self.supervised.shape:
            raise ValueError("tokens and supervision mask must align")

    def __len__(self):
        return len(self.tokens)


@dataclass
class EncodedExample:
    """Quantized frames, flows, and relative camera motions for one scene clip."""

    rgb: list                   # PatchCodes per frame
    flow: list                  # PatchCodes per transition (may be empty)
    poses: list                 # 6-component arrays per transition (may be empty)

    @property
    def n_frames(self):
        return len(self.rgb)


@dataclass(frozen=True)
class Schedule:
    """One serialization recipe: which groups appear, how much is visible."""

    kind: str                   # rgb_only_{2,3,4}f | rgb_flow_{f,fr,rf,rfr}
    ratios: tuple               # visible ratio per rgb frame used
    flow_ratio: float = 1.0
    ordering: str = "random"
    include_pose: bool = True

    def __post_init__(self):
        if self.ordering not in ("random", "raster"):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        for r in tuple(self.ratios) + (self.flow_ratio,):
            if not 0.0 < r <= 1.0:
                raise ValueError(f"ratios must lie in (0, 1], got {r}")


RGB_ONLY_RATIOS = {2: (0.5, 0.3), 3: (0.5, 0.15, 0.15), 4: (0.5, 0.1, 0.1, 0.1)}


def schedule_parts(schedule):
    """Expand a schedule kind into ordered groups.

    Parts are ("pose", t), ("rgb", frame, ratio, supervised) or
    ("flow", transition, ratio). Flow content is always supervised; rgb is
    supervised for every frame except frame 0.
    """
    k = schedule.kind
    pose = schedule.include_pose
    parts = []
    if k.startswith("rgb_only_"):
        n = int(k[len("rgb_only_")])
        if len(schedule.ratios) != n:
            raise ValueError(f"{k} needs {n} ratios, got {len(schedule.ratios)}")
        for t in range(n):
            if pose and t > 0:
                parts.append(("pose", t - 1))
            parts.append(("rgb", t, schedule.ratios[t], t > 0))
        return parts
    if k == "rgb_flow_f":
        parts.append(("rgb", 0, schedule.ratios[0], False))
        if pose:
            parts.append(("pose", 0))
        parts.append(("flow", 0, schedule.flow_ratio))
        return parts
    if k == "rgb_flow_fr":
        parts.append(("rgb", 0, schedule.ratios[0], False))
        if pose:
            parts.append(("pose", 0))
        parts.append(("flow", 0, schedule.flow_ratio))
        parts.append(("rgb", 1, schedule.ratios[1], True))
        return parts
    if k == "rgb_flow_rf":
        parts.append(("rgb", 0, schedule.ratios[0], False))
        if pose:
            parts.append(("pose", 0))
        parts.append(("rgb", 1, schedule.ratios[1], True))
        if pose:
            parts.append(("pose", 1))
        parts.append(("flow", 1, schedule.flow_ratio))
        return parts
    if k == "rgb_flow_rfr":
        parts.append(("rgb", 0, schedule.ratios[0], False))
        if pose:
            parts.append(("pose", 0))
        parts.append(("rgb", 1, schedule.ratios[1], True))
        if pose:
            parts.append(("pose", 1))
        parts.append(("flow", 1, schedule.flow_ratio))
        parts.append(("rgb", 2, schedule.ratios[2], True))
        return parts
    raise ValueError(f"unknown schedule kind {schedule.kind!r}")


def _choose_patches(grid, ratio, ordering, subset_rng, order_rng):
    count = int(np.floor(ratio * grid * grid))
    count = max(count, 1)
    chosen = subset_rng.permutation(grid * grid)[:count]
    if ordering == "raster":
        chosen = np.sort(chosen)
    else:
        chosen = chosen[order_rng.permutation(count)]
    return [(int(i) // grid, int(i) % grid) for i in chosen]


def serialize(example, schedule, rng, layout=None, max_len=None, subset_rng=None):
    """Build the interleaved pointer/content token stream for one example.

    ``rng`` drives patch ordering; ``subset_rng`` (defaults to ``rng``) drives
    which patches are visible, so orderings can be resampled for a fixed
    visible set. Raises when the schedule demands modalities the example
    lacks or when the result would exceed ``max_len``.
    """
    layout = layout or SequenceLayout()
    subset_rng = subset_rng or rng
    parts = schedule_parts(schedule)

    for part in parts:
        if part[0] == "rgb" and part[1] >= example.n_frames:
            raise ValueError(f"schedule {schedule.kind} needs rgb frame {part[1]}, "
                             f"example has {example.n_frames}")
        if part[0] == "flow" and part[1] >= len(example.flow):
            raise ValueError(f"schedule {schedule.kind} needs flow {part[1]}, "
                             f"example has {len(example.flow)}")
        if part[0] == "pose" and part[1] >= len(example.poses):
            raise ValueError(f"schedule {schedule.kind} needs pose {part[1]}, "
                             f"example has {len(example.poses)}")

    tokens = [layout.bos]
    supervised = [False]
    for part in parts:
        if part[0] == "pose":
            t = part[1]
            tokens.append(layout.pointer_token(PointerAddress(t, "camera")))
            supervised.append(False)
            for b in pose_bins_from_components(example.poses[t], layout):
                tokens.append(layout.pose_token(b))
                supervised.append(False)
            continue
        kind, t, ratio = part[0], part[1], part[2]
        is_sup = part[3] if kind == "rgb" else True
        codes = example.rgb[t] if kind == "rgb" else example.flow[t]
        token_of = layout.rgb_code_token if kind == "rgb" else layout.flow_code_token
        for r, c in _choose_patches(layout.grid, ratio, schedule.ordering, subset_rng, rng):
            tokens.append(layout.pointer_token(PointerAddress(t, kind, r, c)))
            supervised.append(False)
            for level in range(layout.levels):
                tokens.append(token_of(level, codes.codes[r, c, level]))
                supervised.append(is_sup)

    if max_len is not None and len(tokens) > max_len:
        raise ValueError(f"serialized sequence length {len(tokens)} exceeds context {max_len}")
    return TokenSequence(np.array(tokens, dtype=np.int32),
                         np.array(supervised, dtype=bool), layout)


def dump_sequence(seq):
    """Human-readable one-line-per-patch view of a serialized example."""
    layout = seq.layout
    lines = []
    i = 0
    toks = seq.tokens
    while i < len(toks):
        kind, _, value = layout.classify(int(toks[i]))
        if kind == "pointer":
            addr = layout.flat_to_address(value)
            n = POSE_DIMS if addr.modality == "camera" else layout.levels
            content = toks[i + 1:i + 1 + n]
            vals = [layout.classify(int(t))[2] for t in content]
            sup = "sup" if seq.supervised[i + 1] else "ctx"
            lines.append(f"{addr.modality}[t={addr.t},r={addr.row},c={addr.col}] -> {vals} ({sup})")
            i += 1 + n
        else:
            lines.append(kind)
            i += 1
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Curriculum
# --------------------------------------------------------------------------

@dataclass
class Curriculum:
    """Two-phase schedule sampler: rgb-only warmup, then a 50/50 flow mixture."""

    total_steps: int
    phase_boundary_frac: float = 0.6
    frames_available: int = 4
    ordering: str = "random"
    include_pose_prob: float = 0.5
    dense_rehearsal_prob: float = 0.25

    @property
    def boundary(self):
        return int(self.total_steps * self.phase_boundary_frac)

    def _rgb_only(self, rng):
        hi = min(self.frames_available, 4)
        n = int(rng.integers(2, hi + 1))
        return Schedule(kind=f"rgb_only_{n}f", ratios=RGB_ONLY_RATIOS[n],
                        ordering=self.ordering,
                        include_pose=bool(rng.uniform() < self.include_pose_prob))

    def _rgb_flow(self, rng):
        kinds = ["rgb_flow_f", "rgb_flow_fr"]
        weights = [0.35, 0.65]
        if self.frames_available >= 3:
            kinds += ["rgb_flow_rf", "rgb_flow_rfr"]
            weights = [0.3, 0.4, 0.15, 0.15]
        kind = str(rng.choice(kinds, p=weights))
        include_pose = bool(rng.uniform() < self.include_pose_prob)
        if kind == "rgb_flow_f":
            # camera-conditioned flow prediction needs the pose most of the time
            include_pose = bool(rng.uniform() < 0.85)
            return Schedule(kind, ratios=(float(rng.uniform(0.5, 1.0)),),
                            flow_ratio=float(rng.uniform(0.25, 1.0)),
                            ordering=self.ordering, include_pose=include_pose)
        if kind == "rgb_flow_fr":
            if rng.uniform() < self.dense_rehearsal_prob:
                return Schedule(kind, ratios=(1.0, float(rng.uniform(0.5, 1.0))),
                                flow_ratio=1.0, ordering=self.ordering,
                                include_pose=include_pose)
            return Schedule(kind, ratios=(float(rng.uniform(0.5, 1.0)),
                                          float(rng.uniform(0.15, 0.5))),
                            flow_ratio=float(rng.uniform(0.25, 1.0)),
                            ordering=self.ordering, include_pose=include_pose)
        if kind == "rgb_flow_rf":
            return Schedule(kind, ratios=(float(rng.uniform(0.5, 1.0)),
                                          float(rng.uniform(0.15, 0.5))),
                            flow_ratio=float(rng.uniform(0.25, 1.0)),
                            ordering=self.ordering, include_pose=include_pose)
        return Schedule(kind, ratios=(0.5, float(rng.uniform(0.15, 0.4)),
                                      float(rng.uniform(0.15, 0.4))),
                        flow_ratio=float(rng.uniform(0.25, 0.75)),
                        ordering=self.ordering, include_pose=include_pose)

    def sample_schedule(self, step, rng):
        if step < self.boundary:
            return self._rgb_only(rng)
        if rng.uniform() < 0.5:
            return self._rgb_only(rng)
        return self._rgb_flow(rng)
