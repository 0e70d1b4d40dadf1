# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im loops backing conv2d and its transpose.

Both functions take and return C-contiguous arrays.  Column layout is
``(N, C*k*k, OH*OW)`` with the row index ordered ``(c, ki, kj)``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real_t:
    float
    double


def im2col(real_t[:, :, :, ::1] x, int k, int stride, int pad, int oh, int ow):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t n, c, ki, kj, i, j, row, src_i, src_j
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros((n_img, chans * k * k, oh * ow), dtype=dtype)
    cdef real_t[:, :, ::1] cols = out
    with nogil:
        for n in range(n_img):
            for c in range(chans):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for i in range(oh):
                            src_i = i * stride + ki - pad
                            if src_i < 0 or src_i >= h:
                                continue
                            for j in range(ow):
                                src_j = j * stride + kj - pad
                                if src_j < 0 or src_j >= w:
                                    continue
                                cols[n, row, i * ow + j] = x[n, c, src_i, src_j]
    return out


def col2im(real_t[:, :, ::1] cols, int chans, int h, int w, int k,
           int stride, int pad, int oh, int ow):
    cdef Py_ssize_t n_img = cols.shape[0]
    cdef Py_ssize_t n, c, ki, kj, i, j, row, dst_i, dst_j
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros((n_img, chans, h, w), dtype=dtype)
    cdef real_t[:, :, :, ::1] x = out
    with nogil:
        for n in range(n_img):
            for c in range(chans):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for i in range(oh):
                            dst_i = i * stride + ki - pad
                            if dst_i < 0 or dst_i >= h:
                                continue
                            for j in range(ow):
                                dst_j = j * stride + kj - pad
                                if dst_j < 0 or dst_j >= w:
                                    continue
                                x[n, c, dst_i, dst_j] += cols[n, row, i * ow + j]
    return out
