"""Segmentation loss (Dice + cross-entropy), semantic prediction disruption
loss, and the combined generator objective.

All losses are computed in float64 and return plain floats; the *_grad
variants additionally return the analytic gradient used by the training
engines (verified against central finite differences in the test suite).
"""

from dataclasses import dataclass

import numpy as np

from .spectral import isc_loss
from .volume import LabelMap, LogitVolume, one_hot


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator objective and the Dice/CE mix."""

    lambda_spd: float = 0.05
    lambda_isc: float = 0.2
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    dice_smooth: float = 1e-5
    spd_mean_reduction: bool = False

    def __post_init__(self):
        for name in ("lambda_spd", "lambda_isc"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")


def _as_logits(x):
    if isinstance(x, LogitVolume):
        x = x.logits
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"logits must be (D, H, W, K), got shape {x.shape}")
    return x


def _as_label(label, k):
    if isinstance(label, LabelMap):
        if label.num_classes != k:
            raise ValueError(f"label has {label.num_classes} classes, logits have {k}")
        return label
    return LabelMap(np.asarray(label), num_classes=k)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the trailing class axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def seg_loss(logits, label, w: LossWeights = LossWeights()) -> float:
    return _seg(logits, label, w, want_grad=False)[0]


def seg_loss_grad(logits, label, w: LossWeights = LossWeights()):
    """(loss, d loss / d logits) for the Dice + cross-entropy objective."""
    return _seg(logits, label, w, want_grad=True)


def _seg(logits, label, w, want_grad):
    logits = _as_logits(logits)
    k = logits.shape[-1]
    label = _as_label(label, k)
    if label.classes.shape != logits.shape[:3]:
        raise ValueError(
            f"label shape {label.classes.shape} does not match logits {logits.shape[:3]}"
        )
    g = one_hot(label).astype(np.float64)
    p = softmax(logits)
    n = float(np.prod(logits.shape[:3]))

    # mean voxel-wise cross-entropy
    p_true = np.take_along_axis(p, label.classes[..., None].astype(np.int64), axis=-1)
    ce = float(-np.log(np.maximum(p_true, 1e-300)).sum() / n)

    # smoothed soft Dice averaged over all classes (background included)
    s = w.dice_smooth
    num = 2.0 * (p * g).sum(axis=(0, 1, 2)) + s
    den = p.sum(axis=(0, 1, 2)) + g.sum(axis=(0, 1, 2)) + s
    dice = float(1.0 - (num / den).mean())

    loss = w.ce_weight * ce + w.dice_weight * dice
    if not want_grad:
        return loss, None

    grad = w.ce_weight * (p - g) / n
    # dice term through the softmax
    dl_dp = -(2.0 * g * den - num) / (den * den) / k
    chain = p * (dl_dp - (dl_dp * p).sum(axis=-1, keepdims=True))
    grad += w.dice_weight * chain
    return loss, grad


def spd_loss(clean, pert, mean_reduction: bool = False) -> float:
    return _spd(clean, pert, mean_reduction, want_grad=False)[0]


def spd_loss_grad(clean, pert, mean_reduction: bool = False):
    """(loss, d loss / d pert); the clean logits are treated as constants."""
    return _spd(clean, pert, mean_reduction, want_grad=True)


def _spd(clean, pert, mean_reduction, want_grad):
    clean = _as_logits(clean)
    pert = _as_logits(pert)
    if clean.shape != pert.shape:
        raise ValueError(f"logit shapes differ: {clean.shape} vs {pert.shape}")
    diff = pert - clean
    scale = 1.0 / diff.size if mean_reduction else 1.0
    loss = float(-np.abs(diff).sum() * scale)
    if not want_grad:
        return loss, None
    return loss, -np.sign(diff) * scale


def total_loss(logits_pert, logits_clean, label, delta, w: LossWeights,
               include_isc: bool = True):
    """Generator objective: seg + lambda_spd * spd + lambda_isc * isc.

    Returns (total, components) with the three raw component values; the
    weighted sum of the components reproduces the total exactly. The caller
    must pass include_isc=False for single-slice volumes.
    """
    seg = seg_loss(logits_pert, label, w)
    spd = spd_loss(logits_clean, logits_pert, w.spd_mean_reduction)
    isc = 0.0
    if include_isc and w.lambda_isc != 0.0:
        isc = isc_loss(delta)
    total = seg + w.lambda_spd * spd + w.lambda_isc * isc
    return total, {"seg": seg, "spd": spd, "isc": isc}
