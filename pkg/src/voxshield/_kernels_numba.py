"""Numba-jitted kernels for the 3x3x3 convolution hot path.

Direct-loop convolutions with prange over output channels. Every parallel
iteration writes a disjoint output slab, so results are bit-reproducible
regardless of thread count.
"""

import warnings

import numpy as np

with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # TBB version probe warning on import
    from numba import njit, prange

NAME = "numba"


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_k3(xpad, w):
    cout, cin = w.shape[0], w.shape[1]
    d, h, ww = xpad.shape[1] - 2, xpad.shape[2] - 2, xpad.shape[3] - 2
    out = np.zeros((cout, d, h, ww), dtype=np.float32)
    for co in prange(cout):
        for ci in range(cin):
            for dz in range(3):
                for dy in range(3):
                    for dx in range(3):
                        wv = w[co, ci, dz, dy, dx]
                        for z in range(d):
                            for y in range(h):
                                for x in range(ww):
                                    out[co, z, y, x] += wv * xpad[ci, z + dz, y + dy, x + dx]
    return out


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_k3_grad_w(xpad, gy):
    cout, cin = gy.shape[0], xpad.shape[0]
    d, h, ww = gy.shape[1], gy.shape[2], gy.shape[3]
    gw = np.empty((cout, cin, 3, 3, 3), dtype=np.float32)
    for co in prange(cout):
        for ci in range(cin):
            for dz in range(3):
                for dy in range(3):
                    for dx in range(3):
                        total = 0.0  # f64 accumulator over f32 row sums
                        for z in range(d):
                            for y in range(h):
                                row = np.float32(0.0)
                                for x in range(ww):
                                    row += gy[co, z, y, x] * xpad[ci, z + dz, y + dy, x + dx]
                                total += row
                        gw[co, ci, dz, dy, dx] = total
    return gw
