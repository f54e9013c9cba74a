# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; contracts mirror blockattn._kernels.pure.

Matrix products go through BLAS (scipy's exported dgemm); the masked
exponentials, online-softmax updates, and gather-shaped control flow are
tight C loops. All arrays are float64 with unit stride along the last axis;
the helpers below translate row-major operands (with explicit row strides)
into column-major dgemm calls.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fmax, INFINITY
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "compiled"


cdef void _gemm_nt(int m, int n, int k, double alpha,
                   const double* A, int lda, const double* B, int ldb,
                   double beta, double* C, int ldc) noexcept nogil:
    """C (m,n) = alpha * A (m,k) @ B (n,k)^T + beta * C, row-major with strides."""
    if m == 0 or n == 0 or k == 0:
        return
    dgemm("T", "N", &n, &m, &k, &alpha, <double*> B, &ldb, <double*> A, &lda, &beta, C, &ldc)


cdef void _gemm_nn(int m, int n, int k, double alpha,
                   const double* A, int lda, const double* B, int ldb,
                   double beta, double* C, int ldc) noexcept nogil:
    """C (m,n) = alpha * A (m,k) @ B (k,n) + beta * C, row-major with strides."""
    if m == 0 or n == 0 or k == 0:
        return
    dgemm("N", "N", &n, &m, &k, &alpha, <double*> B, &ldb, <double*> A, &lda, &beta, C, &ldc)


cdef void _gemm_tn(int m, int n, int k, double alpha,
                   const double* A, int lda, const double* B, int ldb,
                   double beta, double* C, int ldc) noexcept nogil:
    """C (m,n) = alpha * A (k,m)^T @ B (k,n) + beta * C, row-major with strides."""
    if m == 0 or n == 0 or k == 0:
        return
    dgemm("N", "T", &n, &m, &k, &alpha, <double*> B, &ldb, <double*> A, &lda, &beta, C, &ldc)


def block_stats(double[:, ::1] qg, double[:, ::1] kb, double scale, int[::1] valid):
    cdef int n = <int> qg.shape[0], d = <int> qg.shape[1], bk = <int> kb.shape[0]
    cdef Py_ssize_t r, s
    cdef double m_r, l_r
    z_arr = np.empty((n, bk), dtype=np.float64)
    m_arr = np.empty(n, dtype=np.float64)
    l_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] z = z_arr
    cdef double[::1] m = m_arr
    cdef double[::1] l = l_arr
    if n == 0:
        return m_arr, l_arr
    with nogil:
        _gemm_nt(n, bk, d, scale, &qg[0, 0], d, &kb[0, 0], d, 0.0, &z[0, 0], bk)
        for r in range(n):
            m_r = -INFINITY
            for s in range(valid[r]):
                m_r = fmax(m_r, z[r, s])
            l_r = 0.0
            for s in range(valid[r]):
                l_r += exp(z[r, s] - m_r)
            m[r] = m_r
            l[r] = l_r
    return m_arr, l_arr


def block_partial(double[:, ::1] qg, double[:, ::1] kb, double[:, ::1] vb,
                  double[::1] m_rows, double scale, int[::1] valid):
    cdef int n = <int> qg.shape[0], d = <int> qg.shape[1]
    cdef int bk = <int> kb.shape[0], dv = <int> vb.shape[1]
    cdef Py_ssize_t r, s
    p_arr = np.empty((n, bk), dtype=np.float64)
    out_arr = np.zeros((n, dv), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] out = out_arr
    if n == 0:
        return out_arr
    with nogil:
        _gemm_nt(n, bk, d, scale, &qg[0, 0], d, &kb[0, 0], d, 0.0, &p[0, 0], bk)
        for r in range(n):
            for s in range(valid[r]):
                p[r, s] = exp(p[r, s] - m_rows[r])
            for s in range(valid[r], bk):
                p[r, s] = 0.0
        _gemm_nn(n, dv, bk, 1.0, &p[0, 0], bk, &vb[0, 0], dv, 0.0, &out[0, 0], dv)
    return out_arr


def block_backward(double[:, ::1] qg, double[:, ::1] kb, double[:, ::1] vb,
                   double[:, ::1] dog, double[::1] m_rows, double[::1] l_rows,
                   double[::1] delta, double scale, int[::1] valid):
    cdef int n = <int> qg.shape[0], d = <int> qg.shape[1]
    cdef int bk = <int> kb.shape[0], dv = <int> vb.shape[1]
    cdef Py_ssize_t r, s
    p_arr = np.empty((n, bk), dtype=np.float64)
    dp_arr = np.empty((n, bk), dtype=np.float64)
    dq_arr = np.zeros((n, d), dtype=np.float64)
    dk_arr = np.zeros((bk, d), dtype=np.float64)
    dv_arr = np.zeros((bk, dv), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] dp = dp_arr
    cdef double[:, ::1] dq = dq_arr
    cdef double[:, ::1] dk = dk_arr
    cdef double[:, ::1] dvv = dv_arr
    if n == 0:
        return dq_arr, dk_arr, dv_arr
    with nogil:
        _gemm_nt(n, bk, d, scale, &qg[0, 0], d, &kb[0, 0], d, 0.0, &p[0, 0], bk)
        for r in range(n):
            for s in range(valid[r]):
                p[r, s] = exp(p[r, s] - m_rows[r]) / l_rows[r]
            for s in range(valid[r], bk):
                p[r, s] = 0.0
        # dV_blk = P^T @ dOut_rows
        _gemm_tn(bk, dv, n, 1.0, &p[0, 0], bk, &dog[0, 0], dv, 0.0, &dvv[0, 0], dv)
        # dP = dOut_rows @ V_blk^T, then in place dZ = P * (dP - delta)
        _gemm_nt(n, bk, dv, 1.0, &dog[0, 0], dv, &vb[0, 0], dv, 0.0, &dp[0, 0], bk)
        for r in range(n):
            for s in range(bk):
                dp[r, s] = p[r, s] * (dp[r, s] - delta[r])
        _gemm_nn(n, d, bk, scale, &dp[0, 0], bk, &kb[0, 0], d, 0.0, &dq[0, 0], d)
        _gemm_tn(bk, d, n, scale, &dp[0, 0], bk, &qg[0, 0], d, 0.0, &dk[0, 0], d)
    return dq_arr, dk_arr, dv_arr


def query_forward_head(double[:, :, ::1] qh, double[:, ::1] ks, double[:, ::1] vs,
                       int[:, ::1] rows, double scale, int block_size):
    cdef int N = <int> qh.shape[0], g = <int> qh.shape[1], d = <int> qh.shape[2]
    cdef int dv = <int> vs.shape[1], T = <int> rows.shape[1]
    cdef Py_ssize_t t, r, s, c, slot
    cdef int i, length
    cdef Py_ssize_t start, end
    cdef double m_new, w
    out_arr = np.zeros((N, g, dv), dtype=np.float64)
    m_arr = np.full((N, g), -INFINITY, dtype=np.float64)
    l_arr = np.zeros((N, g), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] m = m_arr
    cdef double[:, ::1] l = l_arr
    cdef double[:, ::1] z = np.empty((g, block_size), dtype=np.float64)
    with nogil:
        for t in range(N):
            for slot in range(T):
                i = rows[t, slot]
                if i < 0:
                    break
                start = (<Py_ssize_t> i) * block_size
                if start > t:
                    continue
                end = start + block_size
                if end > t + 1:
                    end = t + 1
                length = <int> (end - start)
                _gemm_nt(g, length, d, scale, &qh[t, 0, 0], d, &ks[start, 0], d,
                         0.0, &z[0, 0], block_size)
                for r in range(g):
                    m_new = m[t, r]
                    for s in range(length):
                        m_new = fmax(m_new, z[r, s])
                    w = exp(m[t, r] - m_new)
                    l[t, r] *= w
                    for c in range(dv):
                        out[t, r, c] *= w
                    for s in range(length):
                        z[r, s] = exp(z[r, s] - m_new)
                        l[t, r] += z[r, s]
                    m[t, r] = m_new
                _gemm_nn(g, dv, length, 1.0, &z[0, 0], block_size, &vs[start, 0], dv,
                         1.0, &out[t, 0, 0], dv)
            for r in range(g):
                for c in range(dv):
                    out[t, r, c] /= l[t, r]
    return out_arr, m_arr, l_arr


def query_backward_head(double[:, :, ::1] qh, double[:, ::1] ks, double[:, ::1] vs,
                        double[:, :, ::1] doh, int[:, ::1] rows, double scale,
                        int block_size):
    cdef int N = <int> qh.shape[0], g = <int> qh.shape[1], d = <int> qh.shape[2]
    cdef int dv = <int> vs.shape[1], T = <int> rows.shape[1]
    cdef Py_ssize_t t, r, s, c, slot
    cdef int i, length
    cdef Py_ssize_t start, end
    cdef double delta_r
    out_arr, m_arr, l_arr = query_forward_head(qh, ks, vs, rows, scale, block_size)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] m = m_arr
    cdef double[:, ::1] l = l_arr
    dq_arr = np.zeros((N, g, d), dtype=np.float64)
    dk_arr = np.zeros((N, d), dtype=np.float64)
    dv_arr = np.zeros((N, dv), dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, ::1] dk = dk_arr
    cdef double[:, ::1] dvs = dv_arr
    cdef double[:, ::1] p = np.empty((g, block_size), dtype=np.float64)
    cdef double[:, ::1] dz = np.empty((g, block_size), dtype=np.float64)
    cdef double[::1] delta = np.empty(g, dtype=np.float64)
    with nogil:
        for t in range(N):
            for r in range(g):
                delta_r = 0.0
                for c in range(dv):
                    delta_r += out[t, r, c] * doh[t, r, c]
                delta[r] = delta_r
            for slot in range(T):
                i = rows[t, slot]
                if i < 0:
                    break
                start = (<Py_ssize_t> i) * block_size
                if start > t:
                    continue
                end = start + block_size
                if end > t + 1:
                    end = t + 1
                length = <int> (end - start)
                _gemm_nt(g, length, d, scale, &qh[t, 0, 0], d, &ks[start, 0], d,
                         0.0, &p[0, 0], block_size)
                for r in range(g):
                    for s in range(length):
                        p[r, s] = exp(p[r, s] - m[t, r]) / l[t, r]
                # dV[start:end] += P^T @ dOut_heads(t)
                _gemm_tn(length, dv, g, 1.0, &p[0, 0], block_size, &doh[t, 0, 0], dv,
                         1.0, &dvs[start, 0], dv)
                _gemm_nt(g, length, dv, 1.0, &doh[t, 0, 0], dv, &vs[start, 0], dv,
                         0.0, &dz[0, 0], block_size)
                for r in range(g):
                    for s in range(length):
                        dz[r, s] = p[r, s] * (dz[r, s] - delta[r])
                _gemm_nn(g, d, length, scale, &dz[0, 0], block_size, &ks[start, 0], d,
                         1.0, &dq[t, 0, 0], d)
                _gemm_tn(length, d, g, scale, &dz[0, 0], block_size, &qh[t, 0, 0], d,
                         1.0, &dk[start, 0], d)
    return dq_arr, dk_arr, dv_arr
