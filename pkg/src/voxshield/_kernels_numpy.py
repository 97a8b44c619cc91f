"""Pure-numpy fallback kernels for the 3x3x3 convolution hot path.

The convolutions are lowered to im2col + a single BLAS sgemm. This path is
selected with VOXSHIELD_BACKEND=numpy or used automatically when numba is
not importable.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _im2col(xpad):
    # (Cin, D+2, H+2, W+2) -> (Cin*27, D*H*W), column order (ci, dz, dy, dx)
    cin = xpad.shape[0]
    win = sliding_window_view(xpad, (3, 3, 3), axis=(1, 2, 3))
    return np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(cin * 27, -1)


def conv3d_k3(xpad, w):
    """Valid 3x3x3 convolution of a zero-padded (Cin,D+2,H+2,W+2) input.

    Returns (Cout, D, H, W) float32. No bias.
    """
    cout = w.shape[0]
    d, h, ww = xpad.shape[1] - 2, xpad.shape[2] - 2, xpad.shape[3] - 2
    cols = _im2col(xpad)
    y = w.reshape(cout, -1) @ cols
    return y.reshape(cout, d, h, ww)


def conv3d_k3_grad_w(xpad, gy):
    """Weight gradient of conv3d_k3: (Cout, Cin, 3, 3, 3) float32."""
    cout = gy.shape[0]
    cols = _im2col(xpad)
    gw = gy.reshape(cout, -1) @ cols.T
    return gw.reshape(cout, xpad.shape[0], 3, 3, 3)
