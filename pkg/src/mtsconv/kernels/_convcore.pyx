# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution core: direct-loop valid cross-correlation and
its gradients.  Semantics match kernels.numpy_backend exactly up to
float summation order."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] k):
    cdef Py_ssize_t B = x.shape[0], I = x.shape[1], T = x.shape[2], F = x.shape[3]
    cdef Py_ssize_t O = k.shape[0], kt = k.shape[2], kf = k.shape[3]
    cdef Py_ssize_t To = T - kt + 1, Fo = F - kf + 1
    y_arr = np.zeros((B, O, To, Fo))
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t b, o, i, a, c, u, v
    cdef double w
    with nogil:
        for b in range(B):
            for o in range(O):
                for i in range(I):
                    for a in range(kt):
                        for c in range(kf):
                            w = k[o, i, a, c]
                            if w == 0.0:
                                continue
                            for u in range(To):
                                for v in range(Fo):
                                    y[b, o, u, v] += w * x[b, i, u + a, v + c]
    return y_arr


def conv2d_grad_kernels(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], I = x.shape[1], T = x.shape[2], F = x.shape[3]
    cdef Py_ssize_t O = gy.shape[1], To = gy.shape[2], Fo = gy.shape[3]
    cdef Py_ssize_t kt = T - To + 1, kf = F - Fo + 1
    gk_arr = np.zeros((O, I, kt, kf))
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, o, i, a, c, u, v
    cdef double acc
    # keep the gy row hot while sweeping kernel offsets; inner loop is a
    # contiguous dot product
    with nogil:
        for b in range(B):
            for o in range(O):
                for u in range(To):
                    for i in range(I):
                        for a in range(kt):
                            for c in range(kf):
                                acc = 0.0
                                for v in range(Fo):
                                    acc += gy[b, o, u, v] * x[b, i, u + a, v + c]
                                gk[o, i, a, c] += acc
    return gk_arr


def conv2d_grad_input(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] k):
    cdef Py_ssize_t B = gy.shape[0], O = gy.shape[1], To = gy.shape[2], Fo = gy.shape[3]
    cdef Py_ssize_t I = k.shape[1], kt = k.shape[2], kf = k.shape[3]
    cdef Py_ssize_t T = To + kt - 1, F = Fo + kf - 1
    gx_arr = np.zeros((B, I, T, F))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, o, i, a, c, u, v
    cdef double w
    with nogil:
        for b in range(B):
            for o in range(O):
                for i in range(I):
                    for a in range(kt):
                        for c in range(kf):
                            w = k[o, i, a, c]
                            if w == 0.0:
                                continue
                            for u in range(To):
                                for v in range(Fo):
                                    gx[b, i, u + a, v + c] += w * gy[b, o, u, v]
    return gx_arr
