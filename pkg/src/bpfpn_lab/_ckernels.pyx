# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop convolution kernels (stride 1, zero padding), float64.

Inputs are copied into a zero-padded plane of width ``W + 2*pad`` and the
output is computed in that same padded-width layout, so every inner loop is
one long contiguous run over a whole plane.  The columns past ``W`` are junk
and get sliced off.  Summation order is fixed, so results are deterministic.
"""

import numpy as np


cdef inline void _axpy(double* dst, const double* src, double alpha, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(n):
        dst[k] += alpha * src[k]


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t k
    cdef double acc = 0.0
    for k in range(n):
        acc += a[k] * b[k]
    return acc


def _padded_planes(x, Py_ssize_t pad, Py_ssize_t slack):
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    flat = np.zeros((n, c, hp * wp + slack), dtype=np.float64)
    flat[:, :, : hp * wp].reshape(n, c, hp, wp)[:, :, pad : pad + h, pad : pad + w] = x
    return flat


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t Wp = W + 2 * pad
    cdef Py_ssize_t L = H * Wp
    cdef Py_ssize_t n, o, c, a, b
    cdef double[:, :, ::1] xp = _padded_planes(np.asarray(x), pad, KW)
    wide = np.zeros((N, O, L), dtype=np.float64)
    cdef double[:, :, ::1] y = wide
    with nogil:
        for n in range(N):
            for o in range(O):
                for c in range(C):
                    for a in range(KH):
                        for b in range(KW):
                            _axpy(&y[n, o, 0], &xp[n, c, a * Wp + b], w[o, c, a, b], L)
    return np.ascontiguousarray(wide.reshape(N, O, H, Wp)[:, :, :, :W])


def conv2d_backward_input(gy, w, Py_ssize_t pad):
    flipped = np.ascontiguousarray(np.asarray(w)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(np.ascontiguousarray(gy), flipped, w.shape[2] - 1 - pad)


def conv2d_backward_weight(double[:, :, :, ::1] x, gy_arr,
                           Py_ssize_t KH, Py_ssize_t KW, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = gy_arr.shape[1]
    cdef Py_ssize_t Wp = W + 2 * pad
    cdef Py_ssize_t L = H * Wp
    cdef Py_ssize_t n, o, c, a, b
    cdef double acc
    cdef double[:, :, ::1] xp = _padded_planes(np.asarray(x), pad, KW)
    gwide = np.zeros((N, O, H, Wp), dtype=np.float64)
    gwide[:, :, :, :W] = gy_arr
    cdef double[:, :, ::1] gy = gwide.reshape(N, O, L)
    out = np.zeros((O, C, KH, KW), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = out
    with nogil:
        for o in range(O):
            for c in range(C):
                for a in range(KH):
                    for b in range(KW):
                        acc = 0.0
                        for n in range(N):
                            acc += _dot(&gy[n, o, 0], &xp[n, c, a * Wp + b], L)
                        gw[o, c, a, b] = acc
    return out
