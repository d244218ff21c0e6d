# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: column unfolding for strided convolutions and CRC-64.

Same contracts as ``_pykernels``; layouts are documented there.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, uint8_t

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _im2col(const real[:, :, :, ::1] x, real[:, ::1] cols,
                  int k, int stride, int pad, int oh, int ow) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t L = oh * ow
    cdef Py_ssize_t b, c, ki, kj, i, j, row, col
    cdef int hi, wj
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for b in range(B):
                    col = b * L
                    for i in range(oh):
                        hi = i * stride - pad + ki
                        if hi < 0 or hi >= H:
                            for j in range(ow):
                                cols[row, col] = 0
                                col += 1
                            continue
                        for j in range(ow):
                            wj = j * stride - pad + kj
                            if wj < 0 or wj >= W:
                                cols[row, col] = 0
                            else:
                                cols[row, col] = x[b, c, hi, wj]
                            col += 1


cdef void _col2im(const real[:, ::1] cols, real[:, :, :, ::1] x,
                  int k, int stride, int pad, int oh, int ow) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t L = oh * ow
    cdef Py_ssize_t b, c, ki, kj, i, j, row, col
    cdef int hi, wj
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for b in range(B):
                    col = b * L
                    for i in range(oh):
                        hi = i * stride - pad + ki
                        if hi < 0 or hi >= H:
                            col += ow
                            continue
                        for j in range(ow):
                            wj = j * stride - pad + kj
                            if wj >= 0 and wj < W:
                                x[b, c, hi, wj] += cols[row, col]
                            col += 1


def im2col(x, int k, int stride, int pad):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int oh = (H + 2 * pad - k) // stride + 1
    cdef int ow = (W + 2 * pad - k) // stride + 1
    cols = np.empty((C * k * k, B * oh * ow), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, k, stride, pad, oh, ow)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, k, stride, pad, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, shape, int k, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    B, C, H, W = shape
    cdef int oh = (H + 2 * pad - k) // stride + 1
    cdef int ow = (W + 2 * pad - k) // stride + 1
    x = np.zeros((B, C, H, W), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, x, k, stride, pad, oh, ow)
    elif cols.dtype == np.float64:
        _col2im[double](cols, x, k, stride, pad, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return x


cdef uint64_t _CRC_TABLE[256]
cdef bint _table_ready = False


cdef void _build_table() noexcept nogil:
    cdef uint64_t poly = 0xC96C5795D7870F42ULL
    cdef uint64_t crc
    cdef int i, j
    for i in range(256):
        crc = i
        for j in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ poly
            else:
                crc >>= 1
        _CRC_TABLE[i] = crc


def crc64(data, unsigned long long crc=0):
    global _table_ready
    if not _table_ready:
        _build_table()
        _table_ready = True
    cdef const uint8_t[::1] buf = memoryview(data).cast("B")
    cdef uint64_t c = ~(<uint64_t>crc)
    cdef Py_ssize_t i, n = buf.shape[0]
    with nogil:
        for i in range(n):
            c = _CRC_TABLE[(c ^ buf[i]) & 0xFF] ^ (c >> 8)
    return int(~c)
