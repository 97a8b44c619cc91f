"""Core value types shared across the pipeline: volumes, labels, noise fields.

Array conventions: volumes and noise are channels-first float32 (C, D, H, W)
with intensities in [0, 1]; label maps are integer (D, H, W); logits and
one-hot encodings are channels-last (D, H, W, K). All types are immutable
after construction (backing arrays are marked read-only) and therefore safe
to share across threads.
"""

from dataclasses import dataclass, field

import numpy as np


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    """A dense 3D image, channels-first (C, D, H, W), intensities in [0, 1]."""

    data: np.ndarray
    id: str
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _frozen(self.data, np.float32)
        if data.ndim != 4:
            raise ValueError(f"volume {self.id}: expected (C, D, H, W), got shape {data.shape}")
        c, d, h, w = data.shape
        if c < 1 or d < 2 or h < 2 or w < 2:
            raise ValueError(f"volume {self.id}: shape {data.shape} below minimum (1, 2, 2, 2)")
        if not np.isfinite(data).all():
            raise ValueError(f"volume {self.id}: non-finite intensities")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError(f"volume {self.id}: intensities outside [0, 1]")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"volume {self.id}: spacing must be 3 positive reals")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.data.shape

    @property
    def spatial_shape(self):
        return self.data.shape[1:]


@dataclass(frozen=True)
class LabelMap:
    """Per-voxel integer class annotation over num_classes classes."""

    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        classes = _frozen(self.classes, np.uint8)
        if classes.ndim != 3:
            raise ValueError(f"label map must be (D, H, W), got shape {classes.shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if classes.max(initial=0) >= self.num_classes:
            raise ValueError(
                f"label value {int(classes.max())} >= num_classes {self.num_classes}"
            )
        object.__setattr__(self, "classes", classes)

    @property
    def spatial_shape(self):
        return self.classes.shape


@dataclass(frozen=True)
class PerturbationField:
    """Additive noise delta of shape (C, D, H, W), bounded by +-epsilon."""

    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        delta = _frozen(self.delta, np.float32)
        if delta.ndim != 4:
            raise ValueError(f"delta must be (C, D, H, W), got shape {delta.shape}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        peak = float(np.abs(delta).max(initial=0.0))
        if peak > self.epsilon + 1e-9:
            raise ValueError(f"|delta| max {peak} exceeds budget {self.epsilon}")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "epsilon", float(self.epsilon))


@dataclass(frozen=True)
class ROIMask:
    """Binary (D, H, W) mask restricting where noise may be injected."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.ascontiguousarray(self.mask)
        if mask.ndim != 3:
            raise ValueError(f"mask must be (D, H, W), got shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "mask", _frozen(mask, np.uint8))


@dataclass(frozen=True)
class ProtectedVolume:
    """A released volume: clamp(clean + delta), traced back to its source."""

    data: np.ndarray
    source_id: str
    generator_fingerprint: str
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _frozen(self.data, np.float32)
        if data.ndim != 4:
            raise ValueError(f"protected {self.source_id}: expected (C, D, H, W)")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError(f"protected {self.source_id}: intensities outside [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def id(self):
        return self.source_id

    @property
    def spatial_shape(self):
        return self.data.shape[1:]


@dataclass(frozen=True)
class LogitVolume:
    """Raw network outputs, channels-last (D, H, W, K)."""

    logits: np.ndarray

    def __post_init__(self):
        logits = _frozen(self.logits, np.float32)
        if logits.ndim != 4:
            raise ValueError(f"logits must be (D, H, W, K), got shape {logits.shape}")
        if not np.isfinite(logits).all():
            raise ValueError("logits contain NaN/Inf")
        object.__setattr__(self, "logits", logits)


def one_hot(label: LabelMap) -> np.ndarray:
    """Dense one-hot encoding (D, H, W, K) of a label map."""
    k = label.num_classes
    out = np.zeros(label.classes.shape + (k,), dtype=np.float32)
    d, h, w = label.classes.shape
    idx = np.indices((d, h, w), sparse=True)
    out[idx[0], idx[1], idx[2], label.classes] = 1.0
    return out


def clamp_unit(data: np.ndarray) -> np.ndarray:
    """Project element-wise onto [0, 1]. Rejects NaN input."""
    data = np.asarray(data)
    if np.isnan(data).any():
        raise ValueError("clamp_unit: NaN input")
    return np.clip(data, 0.0, 1.0)
