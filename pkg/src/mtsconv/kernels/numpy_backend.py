"""Vectorized numpy implementation of the convolution primitives.

All three functions implement valid (no padding) stride-1 2D
cross-correlation and its exact gradients, bias-free; layers add biases
themselves.  Shapes follow the [batch, channel, time, freq] convention.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, k):
    """x: [B, Cin, T, F], k: [Cout, Cin, kt, kf] -> [B, Cout, T-kt+1, F-kf+1]."""
    kt, kf = k.shape[2], k.shape[3]
    win = sliding_window_view(x, (kt, kf), axis=(2, 3))
    return np.einsum("bitfkl,oikl->botf", win, k, optimize=True)


def conv2d_grad_kernels(gy, x):
    """Gradient of the forward map w.r.t. the kernels."""
    to, fo = gy.shape[2], gy.shape[3]
    win = sliding_window_view(x, (to, fo), axis=(2, 3))
    return np.einsum("biacuv,bouv->oiac", win, gy, optimize=True)


def conv2d_grad_input(gy, k):
    """Gradient of the forward map w.r.t. the input.

    Equals a full correlation of gy with the kernel flipped along both
    spatial axes, channels swapped, which reduces to a padded forward
    pass.
    """
    kt, kf = k.shape[2], k.shape[3]
    gyp = np.pad(gy, ((0, 0), (0, 0), (kt - 1, kt - 1), (kf - 1, kf - 1)))
    kswap = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(gyp, kswap)
