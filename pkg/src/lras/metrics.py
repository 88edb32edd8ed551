"""Evaluation metrics and alignment protocols."""

from dataclasses import dataclass

import numpy as np

PSNR_CAP = 99.0


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _grayscale(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def ssim(a, b, window=8, k1=0.01, k2=0.03, data_range=1.0):
    """Mean local SSIM over sliding uniform windows on grayscale images."""
    ga, gb = _grayscale(a), _grayscale(b)
    if ga.shape != gb.shape:
        raise ValueError(f"ssim shape mismatch: {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than ssim window {window}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def win_view(x):
        return np.lib.stride_tricks.sliding_window_view(x, (window, window))

    wa, wb = win_view(ga), win_view(gb)
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


@dataclass
class DepthMetrics:
    absrel: float
    log10: float
    delta1: float

    def __post_init__(self):
        if not 0.0 <= self.delta1 <= 1.0:
            raise ValueError("delta1 must lie in [0, 1]")
        if self.absrel < 0:
            raise ValueError("absrel must be non-negative")


def depth_metrics(pred, gt, valid=None):
    """AbsRel / Log10 / delta1 after global median-scale alignment of pred."""
    pred = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "values", gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth shape mismatch: {pred.shape} vs {gt.shape}")
    mask = np.ones(gt.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not mask.any():
        raise ValueError("empty validity mask")
    p = pred[mask]
    g = gt[mask]
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("depths must be positive inside the mask")
    p = p * (np.median(g) / np.median(p))
    absrel = float(np.mean(np.abs(p - g) / g))
    log10 = float(np.mean(np.abs(np.log10(p) - np.log10(g))))
    ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean(ratio < 1.25))
    return DepthMetrics(absrel=absrel, log10=log10, delta1=delta1)


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = (a | b).sum()
    if union == 0:
        return 0.0
    return float((a & b).sum() / union)


def recover_object_mask(generated, target_rgb, background_rgb):
    """Classify pixels as object by nearest reference appearance.

    A pixel belongs to the object where the generated image is strictly
    closer to the with-object render than to the object-free render; where
    the two references agree the pixel is background by construction.
    """
    gen = np.asarray(generated, dtype=np.float64)
    d_obj = np.abs(gen - np.asarray(target_rgb, dtype=np.float64)).sum(axis=-1)
    d_bg = np.abs(gen - np.asarray(background_rgb, dtype=np.float64)).sum(axis=-1)
    return d_obj < d_bg


def edit_adherence(generated, target_frame, background_rgb, object_id):
    """IoU between the generated object's recovered mask and the target mask."""
    gt_mask = target_frame.masks == object_id
    if not gt_mask.any():
        raise ValueError(f"object {object_id} absent from the target frame")
    rec = recover_object_mask(generated, target_frame.rgb, background_rgb)
    return mask_iou(rec, gt_mask)


def scene_scale_from_flow(model_flow, geometric_flow):
    """Least-squares scalar aligning a geometric flow field to a model's."""
    both = model_flow.valid & geometric_flow.valid
    g = geometric_flow.uv[both]
    m = model_flow.uv[both]
    denom = float((g * g).sum())
    if denom == 0.0:
        raise ValueError("geometric flow is zero everywhere; scale is undefined")
    return float((g * m).sum() / denom)


def block_match_flow(rgb0, rgb1, patch=8, max_disp=16):
    """Integer-displacement SSD block matching; per-patch constant flow.

    The classical stand-in for a learned flow estimator: used to derive flow
    from an image pair when no flow pathway is available.
    """
    a = _grayscale(rgb0)
    b = _grayscale(rgb1)
    h, w = a.shape
    gy, gx = h // patch, w // patch
    pad = max_disp
    bp = np.pad(b, pad, mode="edge")
    best_ssd = np.full((gy, gx), np.inf)
    best_u = np.zeros((gy, gx))
    best_v = np.zeros((gy, gx))
    for dy in range(-max_disp, max_disp + 1):
        for dx in range(-max_disp, max_disp + 1):
            shifted = bp[pad + dy:pad + dy + h, pad + dx:pad + dx + w]
            d2 = (a - shifted) ** 2
            ssd = d2.reshape(gy, patch, gx, patch).sum(axis=(1, 3))
            upd = ssd < best_ssd
            best_ssd[upd] = ssd[upd]
            best_u[upd] = dx
            best_v[upd] = dy
    uv = np.zeros((h, w, 2))
    uv[..., 0] = np.repeat(np.repeat(best_u, patch, axis=0), patch, axis=1)
    uv[..., 1] = np.repeat(np.repeat(best_v, patch, axis=0), patch, axis=1)
    from .geometry import FlowField
    return FlowField(uv, np.ones((h, w), dtype=bool))
