"""Pinhole geometry: unprojection, rigid-motion flow fields, least-squares
rigid fitting, and depth recovery from parallax flow.

Everything here is a deterministic pure function of its inputs. Conventions:
pixel (u, v) = (column, row); a pose maps world points to camera points as
``X_c = R @ X_w + t``; flow is ``pixel_in_frame1 - pixel_in_frame0``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "CameraIntrinsics", "RigidTransform", "FlowField", "CameraMotion",
    "DepthMap", "SparseFlowPrompt", "unproject", "project",
    "flow_from_camera", "flow_from_object", "fit_rigid", "depth_from_flow",
    "aggregate_depth", "sparse_seeds", "save_transform", "load_transform",
]

DISPARITY_EPS = 1e-3   # px; below this a pixel is far/indeterminate
MAX_DEPTH = 100.0      # world units; cap for near-zero disparity


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.cx < 0 or self.cy < 0:
            raise ValueError("principal point must be non-negative")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


class RigidTransform:
    """SE(3) element: 3x3 rotation (orthonormal, det +1) plus translation."""

    __slots__ = ("R", "t")

    def __init__(self, R, t):
        R = np.asarray(R, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1 within 1e-9")
        self.R = R
        self.t = t

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_components(translation, rotvec=None):
        R = np.eye(3) if rotvec is None else Rotation.from_rotvec(np.asarray(rotvec)).as_matrix()
        return RigidTransform(R, translation)

    def apply(self, points):
        """Transform (..., 3) points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def compose(self, other):
        """self after other: x -> self(other(x))."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self):
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def rotvec(self):
        return Rotation.from_matrix(self.R).as_rotvec()

    def is_identity(self, tol=0.0):
        return (np.max(np.abs(self.R - np.eye(3))) <= tol
                and np.max(np.abs(self.t)) <= tol)

    def __repr__(self):
        return f"RigidTransform(rotvec={self.rotvec()}, t={self.t})"


def relative_motion(pose0, pose1):
    """Camera-space motion cam0 -> cam1 for two world->camera poses."""
    return pose1.compose(pose0.inverse())


@dataclass
class FlowField:
    """Per-pixel (u, v) displacement with validity mask."""

    uv: np.ndarray          # (H, W, 2) float
    valid: np.ndarray       # (H, W) bool

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.uv.ndim != 3 or self.uv.shape[2] != 2:
            raise ValueError(f"flow must be (H, W, 2), got {self.uv.shape}")
        if self.valid.shape != self.uv.shape[:2]:
            raise ValueError("validity mask shape does not match flow")
        if not np.all(np.isfinite(self.uv[self.valid])):
            raise ValueError("flow must be finite where valid")

    @property
    def u(self):
        return self.uv[..., 0]

    @property
    def v(self):
        return self.uv[..., 1]

    def magnitude(self):
        return np.hypot(self.uv[..., 0], self.uv[..., 1])

    @staticmethod
    def zeros(h, w):
        return FlowField(np.zeros((h, w, 2)), np.ones((h, w), dtype=bool))


@dataclass(frozen=True)
class CameraMotion:
    """Six pose components as fed to pose tokenization."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    in_plane: bool = False

    def __post_init__(self):
        if self.in_plane and (self.tz != 0.0 or self.rx != 0.0 or self.ry != 0.0 or self.rz != 0.0):
            raise ValueError("in-plane motion requires identity rotation and tz == 0")

    @staticmethod
    def from_transform(transform, in_plane=False):
        r = transform.rotvec()
        return CameraMotion(transform.t[0], transform.t[1], transform.t[2],
                            r[0], r[1], r[2], in_plane=in_plane)

    def transform(self):
        return RigidTransform.from_components(
            [self.tx, self.ty, self.tz], [self.rx, self.ry, self.rz])

    def components(self):
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz])


@dataclass
class DepthMap:
    values: np.ndarray            # (H, W) positive reals
    low_confidence: np.ndarray = None  # (H, W) bool; near-zero disparity etc.

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.low_confidence is None:
            self.low_confidence = np.zeros(self.values.shape, dtype=bool)
        self.low_confidence = np.asarray(self.low_confidence, dtype=bool)
        if self.low_confidence.shape != self.values.shape:
            raise ValueError("confidence mask shape does not match depth")


def _pixel_grid(h, w):
    v, u = np.mgrid[0:h, 0:w]
    return u.astype(np.float64), v.astype(np.float64)


def unproject(depth, K):
    """Lift a depth map to camera-space points: D * K^-1 (u, v, 1)."""
    d = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise ValueError("depth must be finite and positive everywhere")
    h, w = d.shape
    u, v = _pixel_grid(h, w)
    x = (u - K.cx) / K.fx * d
    y = (v - K.cy) / K.fy * d
    return np.stack([x, y, d], axis=-1)


def project(points, K):
    """Pinhole projection of (..., 3) camera-space points to pixel (u, v)."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p[..., 0] / z + K.cx
        v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def _rigid_flow(depth, K, motion):
    """Flow, landing z, landing pixel for a rigid motion of the whole view."""
    p = unproject(depth, K)
    p1 = motion.apply(p)
    uv1 = project(p1, K)
    h, w = depth.shape
    u, v = _pixel_grid(h, w)
    flow = uv1 - np.stack([u, v], axis=-1)
    z1 = p1[..., 2]
    inb = (z1 > 0) & (uv1[..., 0] >= -0.5) & (uv1[..., 0] < w - 0.5) \
        & (uv1[..., 1] >= -0.5) & (uv1[..., 1] < h - 0.5)
    return flow, z1, inb


def flow_from_camera(depth, K, motion):
    """Dense flow induced by a camera motion over a rendered depth map."""
    flow, z1, inb = _rigid_flow(depth, K, motion)
    flow = np.where((z1 > 0)[..., None], flow, 0.0)
    return FlowField(flow, inb)


def flow_from_object(depth, K, transform, mask):
    """Rigid-motion flow on the object mask, exact zeros elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("object mask is empty")
    flow, z1, inb = _rigid_flow(depth, K, transform)
    out = np.zeros_like(flow)
    out[mask] = np.where((z1 > 0)[mask, None], flow[mask], 0.0)
    valid = np.ones(mask.shape, dtype=bool)
    valid[mask] = inb[mask]
    return FlowField(out, valid)


def fit_rigid(points_a, points_b):
    """Closed-form least-squares rigid alignment of two matched point sets.

    Minimises sum ||R a_i + t - b_i||^2 via SVD of the centred
    cross-covariance, with the reflection-correcting determinant factor.
    """
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"point sets must both be (N, 3), got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 correspondences, got {n}")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    ap = a - ca
    bp = b - cb
    h = ap.T @ bp
    u, s, vt = np.linalg.svd(h)
    scale = max(s[0], 1.0)
    if s[1] <= 1e-9 * scale:
        raise ValueError(
            "degenerate correspondences: points are collinear or coincident "
            f"(singular values {s})")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    t = cb - r @ ca
    return RigidTransform(r, t)


def depth_from_flow(flow, motion, K, eps=DISPARITY_EPS, max_depth=MAX_DEPTH):
    """Invert parallax flow from an in-plane translation into a depth map."""
    if not motion.in_plane:
        raise ValueError("depth from flow requires an in-plane camera motion")
    if motion.tx == 0.0 and motion.ty == 0.0:
        raise ValueError("in-plane translation must be non-zero")
    scale = K.fx * abs(motion.tx) if abs(motion.tx) >= abs(motion.ty) else K.fy * abs(motion.ty)
    disp = flow.magnitude()
    low = (disp < eps) | ~flow.valid
    depth = scale / np.maximum(disp, eps)
    depth = np.minimum(depth, max_depth)
    return DepthMap(depth, low)


def aggregate_depth(depths):
    """Median over disparity maps; low-confidence flags OR-combine."""
    if not depths:
        raise ValueError("need at least one depth map")
    shape = depths[0].values.shape
    for d in depths:
        if d.values.shape != shape:
            raise ValueError("depth maps must share a shape")
    disparities = np.stack([1.0 / d.values for d in depths])
    med = np.median(disparities, axis=0)
    low = np.zeros(shape, dtype=bool)
    for d in depths:
        low |= d.low_confidence
    return DepthMap(1.0 / med, low)


@dataclass
class SparseFlowPrompt:
    """Few flow patches pinning motion, optionally with zero-flow stops.

    Entries are (patch_row, patch_col, patch_flow) with patch_flow of shape
    (patch, patch, 2). ``codes`` is filled once a flow quantizer encodes the
    prompt; until then it is None.
    """

    patch: int
    entries: list
    stops: list = field(default_factory=list)
    codes: dict = None

    def __post_init__(self):
        seen = set()
        for r, c, _ in list(self.entries) + list(self.stops):
            if (r, c) in seen:
                raise ValueError(f"duplicate patch address ({r}, {c}) in prompt")
            seen.add((r, c))

    def addresses(self):
        return [(r, c) for r, c, _ in list(self.entries) + list(self.stops)]


def sparse_seeds(dense_flow, object_mask, n_seeds, with_stops=False, patch=8):
    """Pick seed patches over an object by farthest-point coverage.

    The first seed is the patch containing the mask centroid; each further
    seed maximises the minimum distance to already-selected patch centres.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    mask = np.asarray(object_mask, dtype=bool)
    h, w = mask.shape
    gy, gx = h // patch, w // patch
    coverage = mask.reshape(gy, patch, gx, patch).any(axis=(1, 3))
    cand = np.argwhere(coverage)
    if len(cand) < n_seeds:
        raise ValueError(f"object overlaps only {len(cand)} patches, need {n_seeds}")

    ys, xs = np.nonzero(mask)
    centroid = np.array([ys.mean() / patch, xs.mean() / patch])
    order = np.lexsort((cand[:, 1], cand[:, 0]))
    cand = cand[order]
    d0 = np.linalg.norm(cand + 0.5 - centroid, axis=1)
    selected = [cand[int(np.argmin(d0))]]
    remaining = [tuple(rc) for rc in cand if tuple(rc) != tuple(selected[0])]
    while len(selected) < n_seeds:
        best, best_d = None, -1.0
        for rc in remaining:
            d = min(np.hypot(rc[0] - s[0], rc[1] - s[1]) for s in selected)
            if d > best_d:
                best, best_d = rc, d
        selected.append(np.array(best))
        remaining.remove(best)

    uv = np.asarray(dense_flow.uv if isinstance(dense_flow, FlowField) else dense_flow)
    entries = []
    for r, c in selected:
        r, c = int(r), int(c)
        entries.append((r, c, uv[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch, :].copy()))

    stops = []
    if with_stops:
        zero = np.zeros((patch, patch, 2))
        taken = {(r, c) for r, c, _ in entries}
        for r, c in [(0, 0), (0, gx - 1), (gy - 1, 0), (gy - 1, gx - 1)]:
            if (r, c) not in taken:
                stops.append((r, c, zero.copy()))
    return SparseFlowPrompt(patch=patch, entries=entries, stops=stops)


def save_transform(path, transform):
    """Write a rigid transform as 12 whitespace-separated reals (R row-major, then t)."""
    vals = np.concatenate([transform.R.reshape(-1), transform.t])
    with open(path, "w") as f:
        f.write(" ".join(repr(float(x)) for x in vals) + "\n")


def load_transform(path):
    with open(path) as f:
        vals = [float(x) for x in f.read().split()]
    if len(vals) != 12:
        raise ValueError(f"expected 12 values in {path}, got {len(vals)}")
    return RigidTransform(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]))
