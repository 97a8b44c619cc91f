"""Reproducible synthetic 3D segmentation datasets (ellipsoid phantoms).

Each volume holds a handful of randomly rotated ellipsoid "organs" with
class-specific intensity bands over a darker background, plus a smooth
low-frequency bias field and i.i.d. gaussian texture noise. Structures vary
smoothly along z, which is exactly the cross-slice continuity prior the
protection attack targets.

Randomness comes from the counter-based Philox generator, one independent
stream per volume keyed by (seed, volume index), so generation is
deterministic across platforms and volumes may be produced in parallel.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelMap, Volume

PRNG_NAME = "numpy-philox4x64"

BACKGROUND_BASE = 0.2
FOREGROUND_BASE = 0.4
FOREGROUND_STEP = 0.15
BIAS_FIELD_AMPLITUDE = 0.18
EDGE_SOFTEN_SIGMA = 0.6
AXIS_FRACTION_RANGE = (0.15, 0.40)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic dataset."""

    num_volumes: int
    shape: tuple = (32, 32, 32)
    num_classes: int = 2
    objects_per_volume: tuple = (1, 3)
    intensity_noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_volumes < 1:
            raise ValueError("num_volumes must be >= 1")
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or any(s < 8 for s in shape):
            raise ValueError(f"shape components must be >= 8, got {shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        lo, hi = self.objects_per_volume
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_volume range {self.objects_per_volume}")
        if self.intensity_noise_sigma < 0:
            raise ValueError("intensity_noise_sigma must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "objects_per_volume", (int(lo), int(hi)))


def volume_rng(seed: int, index: int) -> np.random.Generator:
    """Philox stream for one volume, stable across platforms."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _paint_ellipsoid(labels, rng, cls):
    """Paint one random ellipsoid; shrinks on retry, never leaves it empty."""
    extent = np.asarray(labels.shape, dtype=np.float64)
    grid = np.indices(labels.shape).astype(np.float64)
    for attempt in range(6):
        shrink = 1.0 - 0.12 * attempt
        center = rng.uniform(0.3, 0.7, size=3) * extent
        axes = rng.uniform(*AXIS_FRACTION_RANGE, size=3) * extent * shrink
        rot = _rotation(rng)
        rel = grid - center[:, None, None, None]
        local = np.einsum("ji,jdhw->idhw", rot, rel)
        inside = ((local / axes[:, None, None, None]) ** 2).sum(axis=0) <= 1.0
        if inside.sum() >= 4:
            labels[inside] = cls
            return
    labels[tuple(np.clip(np.round(center).astype(int), 0, np.asarray(labels.shape) - 1))] = cls


def _bias_field(shape, rng, amplitude=BIAS_FIELD_AMPLITUDE):
    d, h, w = shape
    zz, yy, xx = np.meshgrid(
        np.arange(d) / d, np.arange(h) / h, np.arange(w) / w, indexing="ij"
    )
    field = np.zeros(shape, dtype=np.float64)
    for _ in range(4):
        k = rng.uniform(0.5, 1.5, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.cos(2.0 * np.pi * (k[0] * zz + k[1] * yy + k[2] * xx) + phase)
    peak = np.abs(field).max()
    if peak > 0:
        field *= amplitude / peak
    return field


def _synth_one(spec: SynthSpec, index: int):
    rng = volume_rng(spec.seed, index)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    lo, hi = spec.objects_per_volume
    n_obj = int(rng.integers(lo, hi + 1))
    for _ in range(n_obj):
        cls = 1 + int(rng.integers(0, spec.num_classes - 1))
        _paint_ellipsoid(labels, rng, cls)

    base = np.full(spec.shape, BACKGROUND_BASE, dtype=np.float64)
    for k in range(1, spec.num_classes):
        base[labels == k] = FOREGROUND_BASE + FOREGROUND_STEP * k
    base = ndimage.gaussian_filter(base, EDGE_SOFTEN_SIGMA)
    img = base + _bias_field(spec.shape, rng)
    img += rng.normal(0.0, spec.intensity_noise_sigma, size=spec.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]

    return (
        Volume(img, id=f"vol_{index:03d}"),
        LabelMap(labels, num_classes=spec.num_classes),
    )


def generate_dataset(spec: SynthSpec):
    """Deterministic list of (Volume, LabelMap) pairs for the given spec."""
    return [_synth_one(spec, i) for i in range(spec.num_volumes)]


def split_indices(n: int, fractions=(0.6, 0.2, 0.2)):
    """Contiguous train/val/test index split by volume order.

    Fixed before any protection is applied, so victim evaluation always uses
    clean held-out volumes.
    """
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = list(range(0, n_train))
    val = list(range(n_train, min(n, n_train + n_val)))
    test = list(range(min(n, n_train + n_val), n))
    return train, val, test
