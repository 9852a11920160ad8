# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution core.

Each sample's receptive-field patches are packed into a column matrix once,
and the contraction runs through BLAS dgemm with a fixed summation order, so
results are deterministic for a given build.  The packing is pure data
movement; the arithmetic is the plain convolution sum, which the test suite
pins against a six-loop brute-force oracle.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm


cdef void _pack_cols(double[:, :, :, ::1] xp, Py_ssize_t i,
                     Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
                     Py_ssize_t ho, Py_ssize_t wo, double[:, ::1] col) noexcept nogil:
    cdef Py_ssize_t ci = xp.shape[1]
    cdef Py_ssize_t c, p, q, y, x, r
    r = 0
    for c in range(ci):
        for p in range(kh):
            for q in range(kw):
                for y in range(ho):
                    for x in range(wo):
                        col[r, y * wo + x] = xp[i, c, y * sh + p, x * sw + q]
                r += 1


cdef void _rowmajor_gemm(bint ta, bint tb, Py_ssize_t m, Py_ssize_t n, Py_ssize_t k,
                         double alpha, double* a, Py_ssize_t lda,
                         double* b, Py_ssize_t ldb,
                         double beta, double* c, Py_ssize_t ldc) noexcept nogil:
    # row-major C(m,n) = alpha * op(A)(m,k) @ op(B)(k,n) + beta * C
    # realized as column-major C^T = op(B)^T @ op(A)^T
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    cdef int mm = <int> n, nn = <int> m, kk = <int> k
    cdef int ilda = <int> lda, ildb = <int> ldb, ildc = <int> ldc
    dgemm(&ctb, &cta, &mm, &nn, &kk, &alpha, b, &ildb, a, &ilda, &beta, c, &ildc)


def conv2d_forward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w,
                   double[::1] b, Py_ssize_t sh, Py_ssize_t sw,
                   Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[1]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t rows = ci * kh * kw, cols = ho * wo
    out_arr = np.empty((n, co, ho, wo), dtype=np.float64)
    col_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, ::1] col = col_arr
    cdef Py_ssize_t i, o, y, x
    cdef double bv
    with nogil:
        for i in range(n):
            _pack_cols(xp, i, kh, kw, sh, sw, ho, wo, col)
            # out[i] (co, cols) = W (co, rows) @ col (rows, cols)
            _rowmajor_gemm(False, False, co, cols, rows, 1.0,
                           &w[0, 0, 0, 0], rows, &col[0, 0], cols,
                           0.0, &out[i, 0, 0, 0], cols)
            for o in range(co):
                bv = b[o]
                for y in range(ho):
                    for x in range(wo):
                        out[i, o, y, x] += bv
    return out_arr


def conv2d_backward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] gy, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[1]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t rows = ci * kh * kw, cols = ho * wo
    gxp_arr = np.zeros((n, ci, xp.shape[2], xp.shape[3]), dtype=np.float64)
    gw_arr = np.zeros((co, ci, kh, kw), dtype=np.float64)
    gb_arr = np.zeros(co, dtype=np.float64)
    col_arr = np.empty((rows, cols), dtype=np.float64)
    gcol_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, :, :, ::1] gxp = gxp_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, ::1] col = col_arr
    cdef double[:, ::1] gcol = gcol_arr
    cdef Py_ssize_t i, o, c, p, q, y, x, r
    cdef double acc
    with nogil:
        for i in range(n):
            _pack_cols(xp, i, kh, kw, sh, sw, ho, wo, col)
            # gw (co, rows) += gy[i] (co, cols) @ col^T (cols, rows)
            _rowmajor_gemm(False, True, co, rows, cols, 1.0,
                           &gy[i, 0, 0, 0], cols, &col[0, 0], cols,
                           1.0, &gw[0, 0, 0, 0], rows)
            # gcol (rows, cols) = W^T (rows, co) @ gy[i] (co, cols)
            _rowmajor_gemm(True, False, rows, cols, co, 1.0,
                           &w[0, 0, 0, 0], rows, &gy[i, 0, 0, 0], cols,
                           0.0, &gcol[0, 0], cols)
            for o in range(co):
                acc = 0.0
                for y in range(ho):
                    for x in range(wo):
                        acc += gy[i, o, y, x]
                gb[o] += acc
            # col2im scatter in fixed (c, p, q, y, x) order
            r = 0
            for c in range(ci):
                for p in range(kh):
                    for q in range(kw):
                        for y in range(ho):
                            for x in range(wo):
                                gxp[i, c, y * sh + p, x * sw + q] += gcol[r, y * wo + x]
                        r += 1
    return gxp_arr, gw_arr, gb_arr
