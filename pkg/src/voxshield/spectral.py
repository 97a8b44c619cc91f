"""Per-slice amplitude spectra and the inter-slice spectral consistency loss.

The loss rewards *divergence* between the 2D DFT magnitudes of adjacent
noise slices along z, so minimizing it injects spectral flicker across
slices. The DFT is the unnormalized forward transform; the loss is scale
relative, so its weight absorbs any normalization constant.
"""

from dataclasses import dataclass

import numpy as np

from .volume import PerturbationField


@dataclass(frozen=True)
class SliceSpectrum:
    """2D DFT magnitude of one noise slice. Translation invariant."""

    amplitude: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitude)
        if amp.ndim != 2:
            raise ValueError("amplitude must be 2D (H, W)")
        if (amp < 0).any():
            raise ValueError("amplitude spectrum must be non-negative")
        object.__setattr__(self, "amplitude", amp)


def amplitude_spectrum(slice2d: np.ndarray) -> SliceSpectrum:
    """Element-wise modulus of the unnormalized 2D DFT of a slice."""
    slice2d = np.asarray(slice2d, dtype=np.float64)
    if slice2d.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {slice2d.shape}")
    if np.isnan(slice2d).any():
        raise ValueError("amplitude_spectrum: NaN input")
    return SliceSpectrum(np.abs(np.fft.fft2(slice2d)))


def _as_delta_array(delta):
    if isinstance(delta, PerturbationField):
        delta = delta.delta
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 4:
        raise ValueError(f"delta must be (C, D, H, W), got shape {delta.shape}")
    if np.isnan(delta).any():
        raise ValueError("isc loss: NaN input")
    if delta.shape[1] < 2:
        raise ValueError("isc loss undefined for D < 2; disable the term instead")
    return delta


def isc_loss(delta) -> float:
    """Negative mean Frobenius distance between adjacent slice spectra.

    Always <= 0; equals 0 iff every adjacent pair of slices has identical
    amplitude spectra. Multi-channel input is averaged over channels.
    """
    return _isc(delta, want_grad=False)[0]


def isc_loss_grad(delta):
    """(loss, d loss / d delta) with the modulus subgradient 0 at zeros."""
    return _isc(delta, want_grad=True)


def _isc(delta, want_grad):
    delta = _as_delta_array(delta)
    c, d = delta.shape[0], delta.shape[1]
    hw = delta.shape[2] * delta.shape[3]
    scale = 1.0 / ((d - 1) * c)

    loss = 0.0
    grad = np.zeros_like(delta) if want_grad else None
    for ch in range(c):
        f = np.fft.fft2(delta[ch])          # (D, H, W) complex
        s = np.abs(f)
        diff = s[1:] - s[:-1]
        norms = np.sqrt((diff * diff).sum(axis=(1, 2)))
        loss -= scale * norms.sum()
        if not want_grad:
            continue
        gs = np.zeros_like(s)
        for z in range(d - 1):
            n = norms[z]
            if n == 0.0:
                continue
            unit = diff[z] / n
            gs[z + 1] -= scale * unit
            gs[z] += scale * unit
        # d|F|/d(real input): HW * Re(ifft2(gS * F / S)), 0 where S == 0
        phase = np.where(s > 0.0, f / np.where(s > 0.0, s, 1.0), 0.0)
        grad[ch] = hw * np.fft.ifft2(gs * phase).real
    return float(loss), grad
