# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for 2-D convolution.

Column layout is (N, C*k*k, Ho*Wo) with row index c*k*k + ki*k + kj, matching
``weight.reshape(C_out, -1)``. col2im accumulates contributions in (ki, kj)
order so results are bitwise identical to the numpy fallback.
"""
from cython cimport floating
from libc.string cimport memset


cdef inline void _col_range(Py_ssize_t kj, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t W,
                            Py_ssize_t wo, Py_ssize_t* j0, Py_ssize_t* j1) noexcept nogil:
    # valid j satisfy 0 <= j*stride + kj - pad < W
    cdef Py_ssize_t lo = pad - kj, hi
    if lo <= 0:
        j0[0] = 0
    else:
        j0[0] = (lo + stride - 1) // stride
    hi = W - 1 + pad - kj
    if hi < 0:
        j1[0] = 0
    else:
        j1[0] = hi // stride + 1
        if j1[0] > wo:
            j1[0] = wo
    if j0[0] > j1[0]:
        j0[0] = j1[0]


def im2col(const floating[:, :, :, ::1] x, floating[:, :, ::1] out,
           int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n, c, ki, kj, i, j, j0, j1, r, s0
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        _col_range(kj, stride, pad, W, wo, &j0, &j1)
                        dst = &out[n, (c * k + ki) * k + kj, 0]
                        for i in range(ho):
                            r = i * stride + ki - pad
                            if r < 0 or r >= H:
                                memset(dst, 0, wo * sizeof(floating))
                            else:
                                for j in range(j0):
                                    dst[j] = 0
                                src = &x[n, c, r, 0]
                                s0 = kj - pad
                                for j in range(j0, j1):
                                    dst[j] = src[j * stride + s0]
                                for j in range(j1, wo):
                                    dst[j] = 0
                            dst += wo


def col2im(const floating[:, :, ::1] cols, floating[:, :, :, ::1] out,
           int k, int stride, int pad, int ho, int wo):
    """Scatter-add ``cols`` into ``out`` (which must be zeroed by the caller)."""
    cdef Py_ssize_t n, c, ki, kj, i, j, j0, j1, r, s0
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef const floating* src
    cdef floating* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        _col_range(kj, stride, pad, W, wo, &j0, &j1)
                        src = &cols[n, (c * k + ki) * k + kj, 0]
                        s0 = kj - pad
                        for i in range(ho):
                            r = i * stride + ki - pad
                            if r >= 0 and r < H:
                                dst = &out[n, c, r, 0]
                                for j in range(j0, j1):
                                    dst[j * stride + s0] += src[j]
                            src += wo
