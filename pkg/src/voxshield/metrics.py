"""Segmentation-quality and imperceptibility metrics: DSC, HD95, PSNR, SSIM.

Conventions (pinned because they change absolute numbers):
- DSC of two empty masks is 1.0 (perfect agreement on absence).
- HD95 uses boundary voxels extracted by 6-connectivity erosion difference,
  euclidean distances scaled by voxel spacing, numpy's linear-interpolation
  95th percentile of each directed distance set, and the max of the two
  directions. Both masks empty -> 0.0; exactly one empty -> the volume
  diagonal (the largest attainable distance, keeps averages finite).
- PSNR assumes data range [0, 1] and is capped at 100 dB.
- SSIM is the standard per-slice 2D measure (11x11 gaussian window,
  sigma 1.5, K1=0.01, K2=0.03, data range 1.0) averaged over slices and
  channels.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import ProtectedVolume, Volume

_CROSS = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


@dataclass(frozen=True)
class MetricReport:
    """Per-class overlap/distance scores plus optional imperceptibility."""

    per_class_dsc: tuple
    per_class_hd95: tuple
    psnr: Optional[float] = None
    ssim: Optional[float] = None

    def mean_dsc(self) -> float:
        return float(np.mean(self.per_class_dsc))

    def mean_hd95(self) -> float:
        return float(np.mean(self.per_class_hd95))

    def to_dict(self):
        return {
            "per_class_dsc": list(self.per_class_dsc),
            "per_class_hd95": list(self.per_class_hd95),
            "mean_dsc": self.mean_dsc(),
            "mean_hd95": self.mean_hd95(),
            "psnr": self.psnr,
            "ssim": self.ssim,
        }


def _as_mask(a, name):
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary")
        a = a.astype(bool)
    return a


def dsc(pred, gt) -> float:
    """Dice overlap 2|P&G| / (|P|+|G|); both empty -> 1.0."""
    pred = _as_mask(pred, "pred")
    gt = _as_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def boundary_voxels(mask) -> np.ndarray:
    """Mask minus its 6-connected erosion (array edges count as exposed)."""
    mask = _as_mask(mask, "mask")
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def volume_diagonal(shape, spacing=(1.0, 1.0, 1.0)) -> float:
    """Distance between opposite corner voxel centers."""
    return float(np.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(shape, spacing))))


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed 95th-percentile boundary distances."""
    pred = _as_mask(pred, "pred")
    gt = _as_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p_empty, g_empty = not pred.any(), not gt.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        return volume_diagonal(pred.shape, spacing)
    sp = np.asarray(spacing, dtype=np.float64)
    pb = np.argwhere(boundary_voxels(pred)) * sp
    gb = np.argwhere(boundary_voxels(gt)) * sp
    d_pg = cKDTree(gb).query(pb)[0]
    d_gp = cKDTree(pb).query(gb)[0]
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def _as_data(x, name):
    if isinstance(x, (Volume, ProtectedVolume)):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"{name} must be (C, D, H, W), got shape {x.shape}")
    return x


def psnr(clean, other) -> float:
    """-10 log10(MSE) in dB for [0, 1] data, capped at 100."""
    clean = _as_data(clean, "clean")
    other = _as_data(other, "other")
    if clean.shape != other.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {other.shape}")
    mse = float(np.mean((clean - other) ** 2))
    if mse == 0.0:
        return 100.0
    return float(min(-10.0 * np.log10(mse), 100.0))


_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # 11-tap window at sigma 1.5
_SSIM_PAD = 5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _ssim_slice(a, b):
    f = lambda im: ndimage.gaussian_filter(im, _SSIM_SIGMA, truncate=_SSIM_TRUNCATE)
    ua, ub = f(a), f(b)
    vaa = f(a * a) - ua * ua
    vbb = f(b * b) - ub * ub
    vab = f(a * b) - ua * ub
    s = ((2 * ua * ub + _C1) * (2 * vab + _C2)) / (
        (ua * ua + ub * ub + _C1) * (vaa + vbb + _C2)
    )
    p = _SSIM_PAD
    return float(s[p:-p, p:-p].mean())


def ssim(clean, other) -> float:
    """Mean per-slice 2D SSIM over z-slices and channels."""
    clean = _as_data(clean, "clean")
    other = _as_data(other, "other")
    if clean.shape != other.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {other.shape}")
    h, w = clean.shape[2], clean.shape[3]
    if h < 11 or w < 11:
        raise ValueError(f"slice {h}x{w} smaller than the 11x11 SSIM window")
    vals = [
        _ssim_slice(clean[c, z], other[c, z])
        for c in range(clean.shape[0])
        for z in range(clean.shape[1])
    ]
    return float(np.mean(vals))
