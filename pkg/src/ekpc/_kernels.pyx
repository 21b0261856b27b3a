# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backbone kernels.

Contract-identical to kernels_py. The whole layer loop runs in C with the
matrix products dispatched straight to BLAS (dgemm), so none of the ~30
per-batch numpy op dispatches and temporaries of the fallback remain.
Float64 only.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "compiled"


# Row-major GEMM helpers on top of column-major BLAS: row-major X is the
# column-major X^T, so C = A @ B is computed as C^T = B^T A^T.

cdef inline void _gemm_nn(int m, int n, int k, double alpha, double* a,
                          double* b, double beta, double* c) noexcept nogil:
    # C (m,n) = alpha A (m,k) @ B (k,n) + beta C
    cdef char cn = b'N'
    dgemm(&cn, &cn, &n, &m, &k, &alpha, b, &n, a, &k, &beta, c, &n)


cdef inline void _gemm_nt(int m, int n, int k, double alpha, double* a,
                          double* b, double beta, double* c) noexcept nogil:
    # C (m,n) = alpha A (m,k) @ B^T, B stored (n,k)
    cdef char ct = b'T', cn = b'N'
    dgemm(&ct, &cn, &n, &m, &k, &alpha, b, &k, a, &k, &beta, c, &n)


cdef inline void _gemm_tn(int m, int n, int k, double alpha, double* a,
                          double* b, double beta, double* c) noexcept nogil:
    # C (m,n) = alpha A^T @ B, A stored (k,m), B stored (k,n)
    cdef char ct = b'T', cn = b'N'
    dgemm(&cn, &ct, &n, &m, &k, &alpha, b, &n, a, &m, &beta, c, &n)


def forward_batch(x0_in, w_blocks_in, w_down_in, w_up_in, bint serial=False):
    cdef double[:, :, ::1] x0 = np.ascontiguousarray(x0_in, dtype=np.float64)
    cdef double[:, :, ::1] w_blocks = np.ascontiguousarray(w_blocks_in, dtype=np.float64)
    cdef double[:, :, ::1] w_down = np.ascontiguousarray(w_down_in, dtype=np.float64)
    cdef double[:, :, ::1] w_up = np.ascontiguousarray(w_up_in, dtype=np.float64)

    cdef Py_ssize_t n_layers = w_blocks.shape[0]
    cdef Py_ssize_t b_n = x0.shape[0], t_n = x0.shape[1], d = x0.shape[2]
    cdef Py_ssize_t d_h = w_down.shape[2]
    cdef int m = <int>(b_n * t_n), nd = <int>d, nh = <int>d_h

    xs_arr = np.empty((n_layers + 1, b_n, t_n, d), dtype=np.float64)
    ut_arr = np.empty((n_layers, b_n, t_n, d_h), dtype=np.float64)
    th_arr = np.empty((n_layers, b_n, t_n, d), dtype=np.float64)
    cdef double[:, :, :, ::1] xs = xs_arr
    cdef double[:, :, :, ::1] u_tildes = ut_arr
    cdef double[:, :, :, ::1] tanhs = th_arr

    cdef Py_ssize_t l, i
    cdef Py_ssize_t nxd = b_n * t_n * d, nxh = b_n * t_n * d_h
    cdef double* xl
    cdef double* xn
    cdef double* th
    cdef double* ut
    cdef double v

    if m == 0:
        return xs_arr, ut_arr, th_arr
    memcpy(&xs[0, 0, 0, 0], &x0[0, 0, 0], nxd * sizeof(double))
    with nogil:
        for l in range(n_layers):
            xl = &xs[l, 0, 0, 0]
            xn = &xs[l + 1, 0, 0, 0]
            th = &tanhs[l, 0, 0, 0]
            ut = &u_tildes[l, 0, 0, 0]
            _gemm_nn(m, nd, nd, 1.0, xl, &w_blocks[l, 0, 0], 0.0, th)
            for i in range(nxd):
                th[i] = tanh(th[i])
            _gemm_nn(m, nh, nd, 1.0, th if serial else xl, &w_down[l, 0, 0], 0.0, ut)
            for i in range(nxh):
                if ut[i] < 0.0:
                    ut[i] = 0.0
            memcpy(xn, th, nxd * sizeof(double))
            _gemm_nn(m, nd, nh, 1.0, ut, &w_up[l, 0, 0], 1.0, xn)
    return xs_arr, ut_arr, th_arr


def backward_batch(dfeat_in, xs_in, u_tildes_in, tanhs_in,
                   w_blocks_in, w_down_in, w_up_in, bint serial=False):
    cdef double[:, ::1] dfeat = np.ascontiguousarray(dfeat_in, dtype=np.float64)
    cdef double[:, :, :, ::1] xs = np.ascontiguousarray(xs_in, dtype=np.float64)
    cdef double[:, :, :, ::1] u_tildes = np.ascontiguousarray(u_tildes_in, dtype=np.float64)
    cdef double[:, :, :, ::1] tanhs = np.ascontiguousarray(tanhs_in, dtype=np.float64)
    cdef double[:, :, ::1] w_blocks = np.ascontiguousarray(w_blocks_in, dtype=np.float64)
    cdef double[:, :, ::1] w_down = np.ascontiguousarray(w_down_in, dtype=np.float64)
    cdef double[:, :, ::1] w_up = np.ascontiguousarray(w_up_in, dtype=np.float64)

    cdef Py_ssize_t n_layers = w_blocks.shape[0]
    cdef Py_ssize_t b_n = xs.shape[1], t_n = xs.shape[2], d = xs.shape[3]
    cdef Py_ssize_t d_h = w_down.shape[2]
    cdef int m = <int>(b_n * t_n), nd = <int>d, nh = <int>d_h

    gd_arr = np.zeros((n_layers, d, d_h), dtype=np.float64)
    gu_arr = np.zeros((n_layers, d_h, d), dtype=np.float64)
    dx_arr = np.zeros((b_n, t_n, d), dtype=np.float64)
    dx_arr[:, 0, :] = np.asarray(dfeat)
    cdef double[:, :, ::1] g_down = gd_arr
    cdef double[:, :, ::1] g_up = gu_arr
    cdef double[:, :, ::1] dx = dx_arr

    du_arr = np.empty((b_n, t_n, d_h), dtype=np.float64)
    dp_arr = np.empty((b_n, t_n, d), dtype=np.float64)
    dxn_arr = np.empty((b_n, t_n, d), dtype=np.float64)
    cdef double[:, :, ::1] du_v = du_arr
    cdef double[:, :, ::1] dp_v = dp_arr
    cdef double[:, :, ::1] dxn_v = dxn_arr

    cdef Py_ssize_t l, i
    cdef Py_ssize_t nxd = b_n * t_n * d, nxh = b_n * t_n * d_h
    cdef double* dxp
    cdef double* dup
    cdef double* dpp
    cdef double* dxnp
    cdef double* th
    cdef double* ut
    cdef double tv

    if m == 0:
        return gd_arr, gu_arr
    dxp = &dx[0, 0, 0]
    dup = &du_v[0, 0, 0]
    dpp = &dp_v[0, 0, 0]
    dxnp = &dxn_v[0, 0, 0]
    with nogil:
        for l in range(n_layers - 1, -1, -1):
            th = &tanhs[l, 0, 0, 0]
            ut = &u_tildes[l, 0, 0, 0]
            # dU = (dX @ W_up^T) masked by active units
            _gemm_nt(m, nh, nd, 1.0, dxp, &w_up[l, 0, 0], 0.0, dup)
            for i in range(nxh):
                if ut[i] <= 0.0:
                    dup[i] = 0.0
            # g_up += U^T dX ; g_down += A_in^T dU
            _gemm_tn(nh, nd, m, 1.0, ut, dxp, 1.0, &g_up[l, 0, 0])
            _gemm_tn(nd, nh, m, 1.0,
                     th if serial else &xs[l, 0, 0, 0],
                     dup, 1.0, &g_down[l, 0, 0])
            if serial:
                # dT = dX + dU @ W_down^T, then through tanh and the block
                _gemm_nt(m, nd, nh, 1.0, dup, &w_down[l, 0, 0], 0.0, dpp)
                for i in range(nxd):
                    tv = th[i]
                    dpp[i] = (dpp[i] + dxp[i]) * (1.0 - tv * tv)
                _gemm_nt(m, nd, nd, 1.0, dpp, &w_blocks[l, 0, 0], 0.0, dxnp)
            else:
                for i in range(nxd):
                    tv = th[i]
                    dpp[i] = dxp[i] * (1.0 - tv * tv)
                _gemm_nt(m, nd, nd, 1.0, dpp, &w_blocks[l, 0, 0], 0.0, dxnp)
                _gemm_nt(m, nd, nh, 1.0, dup, &w_down[l, 0, 0], 1.0, dxnp)
            memcpy(dxp, dxnp, nxd * sizeof(double))
    return gd_arr, gu_arr
