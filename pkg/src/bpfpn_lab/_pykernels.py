"""Pure-numpy convolution kernels (stride 1, zero padding).

Same signatures as the compiled ``_ckernels`` module.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv2d_forward(x, w, pad):
    kh, kw = w.shape[2], w.shape[3]
    cols = _windows(x, kh, kw, pad)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward_input(gy, w, pad):
    kh = w.shape[2]
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(gy, flipped, kh - 1 - pad)


def conv2d_backward_weight(x, gy, kh, kw, pad):
    cols = _windows(x, kh, kw, pad)
    return np.ascontiguousarray(np.tensordot(gy, cols, axes=([0, 2, 3], [0, 2, 3])))
